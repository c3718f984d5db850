use normlab_core::ops::{max_pool_backward, pool_with_argmax, relu, relu_backward, PoolKind, PoolSpec};
use normlab_core::tensor::{Shape, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn t<F: FnMut()>(name: &str, mut f: F) {
    let t0 = Instant::now();
    f();
    println!("{name}: {:.3}s", t0.elapsed().as_secs_f64());
}

#[test]
fn probe_ops() {
    let mut rng = StdRng::seed_from_u64(1);
    let s1 = Shape { m: 128, c: 128, h: 28, w: 28 };
    let x1: Tensor<f32> = Tensor::from_vec(s1, (0..s1.count()).map(|_| rng.gen::<f32>() - 0.5).collect()).unwrap();
    let s2 = Shape { m: 128, c: 256, h: 14, w: 14 };
    let x2: Tensor<f32> = Tensor::from_vec(s2, (0..s2.count()).map(|_| rng.gen::<f32>() - 0.5).collect()).unwrap();
    for rep in 0..2 {
        println!("--- rep {rep}");
        t("relu 12.8M x3", || {
            for _ in 0..3 {
                let y = relu(&x1);
                assert!(y.len() > 0);
            }
        });
        t("relu_bwd 12.8M x3", || {
            for _ in 0..3 {
                let g = relu_backward(&x1, &x1);
                assert!(g.len() > 0);
            }
        });
        let ps = PoolSpec::square(PoolKind::Max, 3, 2, 1).unwrap();
        t("maxpool 128c 28->14", || {
            let (y, _am) = pool_with_argmax(&x1, &ps).unwrap();
            assert!(y.len() > 0);
        });
        let (y1, am1) = pool_with_argmax(&x1, &ps).unwrap();
        t("maxpool_bwd 128c", || {
            let g = max_pool_backward(s1, am1.as_deref().unwrap(), &y1).unwrap();
            assert!(g.len() > 0);
        });
        t("maxpool 256c 14->7 fwd+bwd", || {
            let (y, am) = pool_with_argmax(&x2, &ps).unwrap();
            let g = max_pool_backward(s2, am.as_deref().unwrap(), &y).unwrap();
            assert!(g.len() > 0);
        });
    }
}
