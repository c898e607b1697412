use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

fn check(n: usize, m: usize, tau: f64) -> Result<()> {
    if n < 2 || n != m {
        return Err(Error::InvalidArgument(format!(
            "ranking loss needs N >= 2 aligned anchors and candidates, got {n} and {m}"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// Multiple-negatives ranking loss on a tape.
///
/// Row `i` scores anchor `i` against every candidate by cosine / `tau`;
/// candidate `i` is the positive and the rest are negatives. The loss is
/// the mean negative log-softmax of the positives.
pub fn mnr_loss<'t>(anchors: Var<'t>, candidates: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let ([n, _], [m, _]) = (anchors.shape(), candidates.shape());
    check(n, m, tau)?;
    let logp = anchors.cosine_matrix(candidates)?.scale(1.0 / tau)?.log_softmax()?;
    let diag = anchors.tape().constant(Tensor::identity(n));
    logp.mul(diag)?.sum()?.scale(-1.0 / n as f64)
}

/// Plain evaluation of [`mnr_loss`].
pub fn mnr_loss_value(anchors: &[Vec<f64>], candidates: &[Vec<f64>], tau: f64) -> Result<f64> {
    let tape = crate::tensor::Tape::new();
    let a = tape.constant(Tensor::from_rows(anchors)?);
    let c = tape.constant(Tensor::from_rows(candidates)?);
    mnr_loss(a, c, tau)?.item()
}
