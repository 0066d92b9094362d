use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns the largest elementwise relative error.
///
/// The relative error of element `i` is `|auto − fd| / max(|auto|, |fd|, 1e-8)`.
/// `h` must lie in `[1e-6, 1e-4]`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Contract(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    scalar_of(&g, out)?;
    let auto = g
        .backward(out)?
        .get(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = auto.data()[i];
        let denom = a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
