//! Grad-CAM class activation maps over the last preserved unit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::net::{Network, Tensor3};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamResult {
    /// `E_t` for every time step of the explained feature map.
    pub activation: Vec<f64>,
    pub class_index: usize,
    /// Pre-softmax score of `class_index`.
    pub score: f64,
    /// Unit whose output was explained.
    pub unit_index: usize,
    /// Channel weights `α_c`.
    pub weights: Vec<f64>,
}

/// Grad-CAM from a single-instance feature map `A` (`[channels][time]`,
/// batch 1) and the channel weights `α_c = mean_t ∂λ_y/∂A_c(t)`.
pub fn grad_cam_from_weights(activation: &Tensor3, weights: &[f64]) -> Result<Vec<f64>> {
    if activation.batch() != 1 {
        return Err(Error::invalid("grad-cam explains one instance at a time"));
    }
    if weights.len() != activation.channels() {
        return Err(Error::ChannelMismatch {
            expected: activation.channels(),
            actual: weights.len(),
        });
    }
    let mut e = vec![0.0; activation.length()];
    for (c, &w) in weights.iter().enumerate() {
        for (e, a) in e.iter_mut().zip(activation.series(0, c)) {
            *e += w * a;
        }
    }
    e.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(e)
}

/// Grad-CAM for `class` on one instance (`x` with batch 1).
///
/// The explained map is the output of the last preserved unit, which feeds
/// global average pooling and the linear head; its gradient is obtained by
/// back-propagating a one-hot seed on the logit through the head.
pub fn grad_cam(net: &Network, x: &Tensor3, class: usize) -> Result<GradCamResult> {
    let classes = net.spec().classes;
    if class >= classes {
        return Err(Error::ClassOutOfRange { class, classes });
    }
    if x.batch() != 1 {
        return Err(Error::invalid("grad-cam explains one instance at a time"));
    }
    let unit_index = net
        .last_preserved()
        .ok_or_else(|| Error::invalid("grad-cam needs at least one preserved unit"))?;
    let fwd = net.forward(x, false)?;
    let a = &fwd.final_features;
    let pooled = crate::net::layers::Head::pool(a);
    let mut seed = vec![0.0; classes];
    seed[class] = 1.0;
    let mut scratch = vec![0.0; net.param_count()];
    let grad = net
        .head()
        .backward(net.params(), &mut scratch, &pooled, &seed, (1, a.channels(), a.length()));
    let weights: Vec<f64> = (0..a.channels())
        .map(|c| {
            let g = grad.series(0, c);
            g.iter().sum::<f64>() / g.len() as f64
        })
        .collect();
    let activation = grad_cam_from_weights(a, &weights)?;
    Ok(GradCamResult {
        activation,
        class_index: class,
        score: fwd.logits[class],
        unit_index,
        weights,
    })
}

/// Writes `t,E_t` rows with a header line.
pub fn write_csv(result: &GradCamResult, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "t,E_t")?;
    for (t, e) in result.activation.iter().enumerate() {
        writeln!(f, "{t},{e}")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;

    fn instance(len: usize) -> Tensor3 {
        let s: Vec<f64> = (0..len).map(|t| (t as f64 * 0.7).sin() + 0.1 * t as f64).collect();
        Tensor3::from_instances(&[vec![s]]).unwrap()
    }

    #[test]
    fn map_is_non_negative_and_full_length() {
        let net = Network::ungated(NetworkSpec::resnet_with_filters(1, 3, 2, &[4, 6]).with_seed(3)).unwrap();
        for y in 0..3 {
            let r = grad_cam(&net, &instance(24), y).unwrap();
            assert_eq!(r.activation.len(), 24);
            assert!(r.activation.iter().all(|&e| e >= 0.0));
        }
        assert!(matches!(
            grad_cam(&net, &instance(24), 3),
            Err(Error::ClassOutOfRange { class: 3, classes: 3 })
        ));
    }

    #[test]
    fn weights_match_finite_differences() {
        let net = Network::ungated(NetworkSpec::fcn_with_filters(1, 2, 2, &[3, 5]).with_seed(8)).unwrap();
        let x = instance(12);
        let r = grad_cam(&net, &x, 1).unwrap();
        let a = net.forward(&x, false).unwrap().final_features;
        let head = net.head();
        let score = |a: &Tensor3| head.logits(net.params(), &crate::net::layers::Head::pool(a), 1)[1];
        let h = 1e-6;
        for c in 0..a.channels() {
            let mut mean = 0.0;
            for t in 0..a.length() {
                let mut p = a.clone();
                p.set(0, c, t, a.get(0, c, t) + h);
                let mut m = a.clone();
                m.set(0, c, t, a.get(0, c, t) - h);
                mean += (score(&p) - score(&m)) / (2.0 * h);
            }
            mean /= a.length() as f64;
            assert!((mean - r.weights[c]).abs() < 1e-8, "{mean} vs {}", r.weights[c]);
        }
    }

    #[test]
    fn from_weights_cases() {
        let a = Tensor3::from_channel_major(1, 2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, -1.0]).unwrap();
        assert_eq!(grad_cam_from_weights(&a, &[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(grad_cam_from_weights(&a, &[2.0, 0.0]).unwrap(), vec![2.0, 0.0, 6.0]);
        let e1 = grad_cam_from_weights(&a, &[0.3, -0.7]).unwrap();
        let doubled = Tensor3::from_channel_major(1, 2, 3, a.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let e2 = grad_cam_from_weights(&doubled, &[0.3, -0.7]).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_layout() {
        let r = GradCamResult {
            activation: vec![0.0, 1.5],
            class_index: 0,
            score: 0.0,
            unit_index: 0,
            weights: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cam.csv");
        write_csv(&r, &p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "t,E_t\n0,0\n1,1.5\n");
    }
}
