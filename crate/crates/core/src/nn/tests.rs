use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ddpm::LossNorm;

/// Compares tape gradients with central differences for every parameter element.
fn check<F>(store: &mut ParamStore, f: F)
where
    F: Fn(&mut Graph) -> NodeId,
{
    let grads = {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        g.backward(root)
    };
    let h = 1e-5;
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.get(id).data.len() {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + h;
            let up = {
                let mut g = Graph::new(store);
                let r = f(&mut g);
                g.value(r)[0]
            };
            store.get_mut(id).data[i] = orig - h;
            let down = {
                let mut g = Graph::new(store);
                let r = f(&mut g);
                g.value(r)[0]
            };
            store.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map(|g| g[i]).unwrap_or(0.0);
            let denom = numeric.abs().max(analytic.abs()).max(1e-7);
            assert!(
                (numeric - analytic).abs() / denom < 1e-5,
                "{} [{i}]: analytic {analytic} numeric {numeric}",
                store.get(id).name
            );
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn linear_layernorm_activation_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 4, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 4);
    // perturb the norm affine so its gradient path is non-trivial
    for v in store.get_mut(ln.gamma).data.iter_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
    let x = rand_vec(&mut rng, 2 * 3 * 5);
    let target = rand_vec(&mut rng, 2 * 3 * 4);
    check(&mut store, |g| {
        let xi = g.input(x.clone(), &[2, 3, 5]);
        let h = lin.forward(g, xi);
        let h = ln.forward(g, h);
        let a = g.silu(h);
        let b = g.relu(h);
        let s = g.add(a, b);
        let m = g.mul(s, h);
        let m = g.scale(m, 0.7);
        g.loss(m, target.clone(), LossNorm::SquaredL2)
    });
}

#[test]
fn conv_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let tc = TemporalConv::new(&mut store, "tc", 3, 2, 3, &mut rng);
    let c1 = Conv3x3::new(&mut store, "c1", 2, 3, 1, &mut rng);
    let c2 = Conv3x3::new(&mut store, "c2", 3, 2, 2, &mut rng);
    let x1 = rand_vec(&mut rng, 2 * 5 * 3);
    let x2 = rand_vec(&mut rng, 2 * 4 * 4 * 2);
    let t1 = rand_vec(&mut rng, 2 * 5 * 2);
    let t2 = rand_vec(&mut rng, 2 * 4 * 4 * 2);
    check(&mut store, |g| {
        let a = g.input(x1.clone(), &[2, 5, 3]);
        let y1 = tc.forward(g, a);
        let l1 = g.loss(y1, t1.clone(), LossNorm::SquaredL2);
        let b = g.input(x2.clone(), &[2, 4, 4, 2]);
        let h = c1.forward(g, b);
        let h = c2.forward(g, h);
        let h = g.upsample2(h);
        let l2 = g.loss(h, t2.clone(), LossNorm::SquaredL2);
        g.add(l1, l2)
    });
}

#[test]
fn attention_concat_broadcast_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let q = Linear::new(&mut store, "q", 3, 3, &mut rng);
    let k = Linear::new(&mut store, "k", 3, 3, &mut rng);
    let v = Linear::new(&mut store, "v", 3, 3, &mut rng);
    let e = store.add_uniform("e", &[2, 6], 1.0, &mut rng);
    let x = rand_vec(&mut rng, 2 * 4 * 3);
    let target = rand_vec(&mut rng, 2 * 4 * 6);
    check(&mut store, |g| {
        let xi = g.input(x.clone(), &[2, 4, 3]);
        let (qq, kk, vv) = (q.forward(g, xi), k.forward(g, xi), v.forward(g, xi));
        let s = g.bmm(qq, kk, true);
        let a = g.softmax(s);
        let o = g.bmm(a, vv, false);
        let c = g.concat(&[o, xi]);
        let ep = g.param(e);
        let c = g.broadcast_rows(c, ep);
        let c = g.reshape(c, &[8, 6]);
        g.loss(c, target.clone(), LossNorm::SquaredL2)
    });
}

#[test]
fn l1_loss_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, &mut rng);
    let x = rand_vec(&mut rng, 6);
    let target = vec![5.0; 4];
    check(&mut store, |g| {
        let xi = g.input(x.clone(), &[2, 3]);
        let y = lin.forward(g, xi);
        g.loss(y, target.clone(), LossNorm::L1)
    });
}

#[test]
fn gemm_transposes() {
    // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [5.0, 6.0, 7.0, 8.0];
    let mut c = [0.0; 4];
    gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
    assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
    assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
    assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
}

#[test]
fn sinusoidal_two_dims() {
    let e = sinusoidal_embedding(&[0, 3], 2);
    assert_eq!(e, vec![0.0, 1.0, 3f64.sin(), 3f64.cos()]);
}

#[test]
fn adam_moves_against_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", &[2], vec![1.0, -1.0]);
    let mut opt = Adam::new(
        AdamConfig {
            lr: 0.1,
            grad_clip: None,
            ..AdamConfig::default()
        },
        &store,
    );
    for _ in 0..50 {
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.param(p);
            let l = g.loss(x, vec![0.0, 0.0], LossNorm::SquaredL2);
            g.backward(l)
        };
        opt.update(&mut store, &grads);
    }
    assert!(store.get(p).data.iter().all(|v| v.abs() < 0.2));
    assert_eq!(opt.step, 50);
}
