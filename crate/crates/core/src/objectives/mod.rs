//! Loss and pooling functions of the incremental objective, each with an
//! analytic gradient with respect to its logit inputs.

mod losses;
mod pooling;
mod pseudo;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use losses::{
    cls_loss, cls_loss_grad, kde_loss, kde_loss_grad, kdl_loss, kdl_loss_grad, rasp_loss,
    rasp_loss_grad, seg_loss, seg_loss_grad, FeatureTensor,
};
pub use pooling::{
    focal_penalty, image_scores, image_scores_backward, ngwp_aggregate, pixel_softmax,
};
pub use pseudo::{fuse_supervision, smooth_pseudo_labels, ChannelPartition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the semantic prior term.
    pub lambda_rasp: f64,
    /// Temperature of the similarity maps.
    pub tau: f64,
    /// Weight of the one-hot term when smoothing pseudo-labels.
    pub alpha: f64,
    pub epsilon_ngwp: f64,
    pub gamma_focal: f64,
    /// Offset inside the focal penalty's logarithm; must stay positive.
    pub lambda_focal: f64,
    /// Epochs during which the segmentation loss is left out.
    pub seg_warmup_epochs: usize,
    /// Feature distillation uses the squared per-pixel distance when set,
    /// the plain Euclidean distance otherwise.
    pub kde_squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rasp: 1.0,
            tau: 5.0,
            alpha: 0.5,
            epsilon_ngwp: 1e-5,
            gamma_focal: 3.0,
            lambda_focal: 0.01,
            seg_warmup_epochs: 5,
            kde_squared: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Invalid(format!("loss config: {what}")))
            }
        };
        check(
            self.lambda_rasp >= 0.0 && self.lambda_rasp.is_finite(),
            "lambda_rasp must be >= 0",
        )?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau must be > 0")?;
        check(
            (0.0..=1.0).contains(&self.alpha),
            "alpha must lie in [0, 1]",
        )?;
        check(self.epsilon_ngwp > 0.0, "epsilon_ngwp must be > 0")?;
        check(self.gamma_focal >= 0.0, "gamma_focal must be >= 0")?;
        check(self.lambda_focal > 0.0, "lambda_focal must be > 0")?;
        Ok(())
    }
}

/// Scalar loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub kdl: f64,
    pub kde: f64,
    pub seg: f64,
    pub rasp: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.kdl, self.kde, self.seg, self.rasp]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn seg_active(cfg: &LossConfig, epoch: usize) -> bool {
    epoch >= cfg.seg_warmup_epochs
}

/// `cls + kdl + kde + [seg after warmup] + lambda_rasp * rasp`.
pub fn total_loss(components: &LossComponents, cfg: &LossConfig, epoch: usize) -> Result<f64> {
    if !components.is_finite() {
        return Err(Error::NonFinite(format!("loss components {components:?}")));
    }
    let mut total = components.cls + components.kdl + components.kde;
    if seg_active(cfg, epoch) {
        total += components.seg;
    }
    Ok(total + cfg.lambda_rasp * components.rasp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones() -> LossComponents {
        LossComponents {
            cls: 1.0,
            kdl: 1.0,
            kde: 1.0,
            seg: 1.0,
            rasp: 1.0,
        }
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(&ones(), &cfg, 5).unwrap(), 5.0);
        assert_eq!(total_loss(&ones(), &cfg, 0).unwrap(), 4.0);
        let baseline = LossConfig {
            lambda_rasp: 0.0,
            ..cfg.clone()
        };
        let c = LossComponents {
            cls: 0.3,
            kdl: 0.2,
            kde: 0.7,
            seg: 0.4,
            rasp: 9.0,
        };
        assert_eq!(
            total_loss(&c, &baseline, 10).unwrap(),
            0.3 + 0.2 + 0.7 + 0.4
        );
        let bad = LossComponents { kde: f64::NAN, ..c };
        assert!(total_loss(&bad, &cfg, 0).is_err());
    }

    #[test]
    fn warmup_switch() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.seg_warmup_epochs, 5);
        assert!((0..5).all(|e| !seg_active(&cfg, e)));
        assert!(seg_active(&cfg, 5));
    }

    #[test]
    fn config_validation_and_defaults() {
        let cfg = LossConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.tau, cfg.lambda_rasp), (5.0, 1.0));
        assert!(LossConfig {
            lambda_focal: 0.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha: 1.5,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            tau: 0.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        let parsed: LossConfig = serde_json::from_str(r#"{"lambda_rasp": 0.0}"#).unwrap();
        assert_eq!(parsed.lambda_rasp, 0.0);
        assert_eq!(parsed.gamma_focal, 3.0);
    }
}
