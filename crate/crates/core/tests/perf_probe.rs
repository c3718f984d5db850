use normlab_core::model::Model;
use normlab_core::network::build_cifar10_nv;
use normlab_core::network::NormKind;
use normlab_core::tensor::{Shape, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::Instant;

#[test]
fn probe() {
    let spec = build_cifar10_nv(NormKind::WeightNorm);
    let mut model: Model<f32> = Model::new(spec, 1).unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    let shape = Shape {
        m: 128,
        c: 3,
        h: 28,
        w: 28,
    };
    let data: Vec<f32> = (0..shape.count()).map(|_| rng.gen::<f32>() - 0.5).collect();
    let x = Tensor::from_vec(shape, data).unwrap();
    let labels: Vec<usize> = (0..128).map(|i| i % 10).collect();
    for rep in 0..3 {
        let t0 = Instant::now();
        let rec = model.forward_train(&x, &labels).unwrap();
        let t1 = Instant::now();
        let mut grads = rec.tape.backward(rec.loss).unwrap();
        let t2 = Instant::now();
        let g = model.collect_grads(&rec, &mut grads);
        assert!(!g.is_empty());
        println!(
            "rep {rep}: fwd {:.2}s bwd {:.2}s total {:.2}s",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t2 - t0).as_secs_f64()
        );
    }
}
