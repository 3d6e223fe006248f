use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

const H: f64 = 1e-5;

/// Largest relative disagreement between the taped gradient of a scalar
/// function and its central finite difference with step `h`.
///
/// Per coordinate the error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn gradcheck<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("gradcheck: step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    if !g.value(y).is_scalar() {
        return Err(Error::Contract(format!(
            "gradcheck: function must be scalar-valued, got shape {:?}",
            g.value(y).shape()
        )));
    }
    let analytic = if g.requires_grad(y) {
        g.backward(y)?;
        g.grad(x)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; point.numel()])
    } else {
        vec![0.0; point.numel()]
    };

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.scalar(y))
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn rt(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SplitMix64::new(seed))
}

/// Weighted sum with fixed random weights so every output coordinate
/// contributes a well-scaled gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rt(g.value(y).shape(), seed ^ 0xABCD));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Gradchecks every tape primitive at ten seeded points each and reports the
/// worst relative error per primitive.
pub fn primitive_gradchecks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut check = |name: &'static str, shape: &[usize], f: &dyn Fn(&mut Graph, Var, u64) -> Result<Var>| {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let point = rt(shape, 100 + seed);
            let e = gradcheck(|g, x| f(g, x, seed), &point, H).unwrap();
            worst = worst.max(e);
        }
        out.push((name, worst));
    };
    check("matmul", &[3, 4], &|g, x, s| {
        let b = g.constant(rt(&[4, 2], s));
        let y = g.matmul(x, b)?;
        let c = g.constant(rt(&[5, 3], s + 1));
        let z = g.matmul(c, y)?;
        probe(g, z, s)
    });
    check("add", &[3, 4], &|g, x, s| {
        let b = g.constant(rt(&[4], s));
        let y = g.add(x, b)?;
        let z = g.add(y, x)?;
        probe(g, z, s)
    });
    check("add_broadcast_rhs", &[4], &|g, x, s| {
        let a = g.constant(rt(&[3, 4], s));
        let y = g.add(a, x)?;
        probe(g, y, s)
    });
    check("sub", &[3, 4], &|g, x, s| {
        let b = g.constant(rt(&[3, 4], s));
        let y = g.sub(b, x)?;
        probe(g, y, s)
    });
    check("mul", &[3, 4], &|g, x, s| {
        let b = g.constant(rt(&[3, 4], s));
        let y = g.mul(x, b)?;
        let z = g.mul(y, x)?;
        probe(g, z, s)
    });
    check("div", &[3, 4], &|g, x, s| {
        let b = g.constant(rt(&[3, 4], s).map(|v| 2.0 + v.abs()));
        let num = g.div(x, b)?;
        let sq = g.mul(x, x)?;
        let one = g.constant(Tensor::full(&[3, 4], 1.5));
        let den = g.add(sq, one)?;
        let y = g.div(num, den)?;
        probe(g, y, s)
    });
    check("scale", &[2, 5], &|g, x, s| {
        let y = g.scale(x, -0.37);
        probe(g, y, s)
    });
    check("transpose", &[3, 5], &|g, x, s| {
        let y = g.transpose(x)?;
        probe(g, y, s)
    });
    check("reshape", &[3, 4], &|g, x, s| {
        let y = g.reshape(x, &[2, 6])?;
        probe(g, y, s)
    });
    check("softmax_rows", &[3, 6], &|g, x, s| {
        let y = g.softmax_rows(x)?;
        probe(g, y, s)
    });
    check("rmsnorm_x", &[3, 6], &|g, x, s| {
        let gain = g.constant(rt(&[6], s));
        let y = g.rmsnorm(x, gain)?;
        probe(g, y, s)
    });
    check("rmsnorm_gain", &[6], &|g, x, s| {
        let inp = g.constant(rt(&[3, 6], s));
        let y = g.rmsnorm(inp, x)?;
        probe(g, y, s)
    });
    check("gelu", &[4, 4], &|g, x, s| {
        let y = g.gelu(x);
        probe(g, y, s)
    });
    check("embedding_lookup", &[5, 3], &|g, x, s| {
        let y = g.embedding(x, &[4, 0, 4, 2, 1, 0])?;
        probe(g, y, s)
    });
    check("cross_entropy_rows", &[4, 7], &|g, x, _s| {
        let y = g.cross_entropy_rows(x, &[0, 6, 3, 3])?;
        g.mean(y)
    });
    check("frobenius_sq", &[3, 3], &|g, x, _s| Ok(g.frobenius_sq(x)));
    check("mean", &[3, 3], &|g, x, _s| {
        let sq = g.mul(x, x)?;
        g.mean(sq)
    });
    check("sum", &[3, 3], &|g, x, s| {
        let y = g.gelu(x);
        let _ = s;
        Ok(g.sum(y))
    });
    check("causal_attention", &[8, 12], &|g, x, s| {
        let y = g.causal_attention(x, 2, 4)?;
        probe(g, y, s)
    });
    out
}
