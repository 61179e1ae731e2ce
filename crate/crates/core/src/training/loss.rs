use crate::decoders::DecodedPrediction;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Total objective node plus the value of each unweighted term.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub spatial: f64,
    pub temporal: f64,
}

fn term<F: Scalar>(g: &mut Graph<F>, pred: &DecodedPrediction, target: &Tensor<F>, which: &str) -> Result<Var> {
    let shape = g.shape(pred.predictions).to_vec();
    if target.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "{which} prediction rows {:?} do not match target rows {:?}",
            shape,
            target.shape()
        )));
    }
    let t = g.constant(target.clone());
    Ok(g.mse(pred.predictions, t)?)
}

/// `λ_s·MSE(current) + λ_t·MSE(future)`, each term averaged over masked
/// tokens and pixel dims. A missing or empty current-frame term counts as 0.
///
/// Targets are the normalized patches at the masked positions, in the same
/// row order as the predictions.
pub fn stp_loss<F: Scalar>(
    g: &mut Graph<F>,
    pred_c: Option<&DecodedPrediction>,
    pred_f: &DecodedPrediction,
    targets_c: &Tensor<F>,
    targets_f: &Tensor<F>,
    lambda_s: f64,
    lambda_t: f64,
) -> Result<LossParts> {
    let lt = term(g, pred_f, targets_f, "future")?;
    let temporal = g.value(lt).item().as_f64();
    let weighted_t = g.scale(lt, F::lit(lambda_t))?;
    let Some(pred_c) = pred_c else {
        return Ok(LossParts { total: weighted_t, spatial: 0.0, temporal });
    };
    let ls = term(g, pred_c, targets_c, "current")?;
    let spatial = g.value(ls).item().as_f64();
    let weighted_s = g.scale(ls, F::lit(lambda_s))?;
    let total = g.add(weighted_s, weighted_t)?;
    Ok(LossParts { total, spatial, temporal })
}
