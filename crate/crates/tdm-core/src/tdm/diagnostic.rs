use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Per-class channel variance and the resulting keep-mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVariance {
    /// One entry per channel: the mean over instances and positions of the
    /// squared deviation from the class's channel mean.
    pub variance: Vec<f64>,
    /// 1.0 keeps a channel, 0.0 drops it.
    pub mask: Vec<f64>,
}

/// For each class, measures how much each channel varies across the class's
/// instances and masks the `floor(drop_fraction · C)` highest-variance
/// channels. Channels with zero variance are never masked; ties keep the
/// lower channel index ahead.
pub fn channel_variance_diagnostic(class_maps: &[Vec<FeatureMap>], drop_fraction: f64) -> Result<Vec<ChannelVariance>> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop fraction {drop_fraction} outside [0, 1)")));
    }
    class_maps
        .iter()
        .enumerate()
        .map(|(class, maps)| {
            if maps.len() < 2 {
                return Err(Error::InsufficientInstances {
                    class,
                    available: maps.len(),
                });
            }
            let shape = maps[0].tensor().shape();
            if maps.iter().any(|m| m.tensor().shape() != shape) {
                return Err(Error::shape(format!("class {class} mixes feature map shapes")));
            }
            let (c, hw) = (maps[0].channels(), maps[0].height() * maps[0].width());
            let n = maps.len() as f64;
            let mut mean = vec![0.0; c * hw];
            for m in maps {
                mean.iter_mut().zip(m.tensor().data()).for_each(|(a, v)| *a += v / n);
            }
            let mut variance = vec![0.0; c];
            for m in maps {
                for (ch, var) in variance.iter_mut().enumerate() {
                    let span = ch * hw..(ch + 1) * hw;
                    *var += m.tensor().data()[span.clone()]
                        .iter()
                        .zip(&mean[span])
                        .map(|(v, mu)| (v - mu).powi(2))
                        .sum::<f64>();
                }
            }
            variance.iter_mut().for_each(|v| *v /= n * hw as f64);

            let drop = (drop_fraction * c as f64 + 1e-9).floor() as usize;
            let mut order: Vec<usize> = (0..c).filter(|&i| variance[i] > 0.0).collect();
            order.sort_by(|&a, &b| variance[b].total_cmp(&variance[a]).then(a.cmp(&b)));
            let mut mask = vec![1.0; c];
            for &i in order.iter().take(drop) {
                mask[i] = 0.0;
            }
            Ok(ChannelVariance { variance, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(d: &[f64]) -> FeatureMap {
        FeatureMap::from_vec(d.len() / 2, 1, 2, d.to_vec()).unwrap()
    }

    #[test]
    fn identical_instances_have_no_variance() {
        let a = fm(&[1.0, 2.0, 3.0, 4.0]);
        let r = channel_variance_diagnostic(&[vec![a.clone(), a]], 0.5).unwrap();
        assert_eq!(r[0].variance, vec![0.0, 0.0]);
        assert_eq!(r[0].mask, vec![1.0, 1.0]);
    }

    #[test]
    fn differing_channel_is_dropped_first() {
        let a = fm(&[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let b = fm(&[1.0, 2.0, 3.0, 4.0, 2.0, -2.0]);
        let r = channel_variance_diagnostic(&[vec![a, b]], 1.0 / 3.0).unwrap();
        assert_eq!(r[0].variance[..2], [0.0, 0.0]);
        // channel mean is (1, -1); every deviation is ±1
        assert_eq!(r[0].variance[2], 1.0);
        assert_eq!(r[0].mask, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_fraction_keeps_everything() {
        let a = fm(&[1.0, 2.0, 3.0, 4.0]);
        let b = fm(&[0.0, 5.0, -3.0, 4.0]);
        let r = channel_variance_diagnostic(&[vec![a, b]], 0.0).unwrap();
        assert_eq!(r[0].mask, vec![1.0, 1.0]);
    }

    #[test]
    fn single_instance_rejected() {
        let err = channel_variance_diagnostic(&[vec![fm(&[1.0, 2.0])]], 0.1).unwrap_err();
        assert!(matches!(err, Error::InsufficientInstances { class: 0, available: 1 }));
    }
}
