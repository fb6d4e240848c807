use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares the tape gradient of a scalar function against central
/// differences and returns the maximum relative error
/// `|analytic − numeric| / (|analytic| + 1e-8)` over all entries of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let y = f(&mut tape, xv)?;
        tape.backward(y)?.dense(xv)
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(t.clone());
        let y = f(&mut tape, xv)?;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(TensorError::NonScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}
