use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub top1: f64,
    pub correct: usize,
    pub n_images: usize,
    pub n_classes: usize,
}

/// Index of the most similar class per image; ties go to the lower index.
pub fn predict<T: Real>(images: &Mat<T>, classes: &Mat<T>) -> Result<Vec<usize>> {
    if images.cols() != classes.cols() {
        return Err(Error::Shape(format!(
            "image dim {} vs class dim {}",
            images.cols(),
            classes.cols()
        )));
    }
    if classes.rows() == 0 {
        return Err(Error::Data("no classes".into()));
    }
    Ok((0..images.rows())
        .map(|i| {
            let x = images.row(i);
            let mut best = 0;
            let mut best_v = dot(x, classes.row(0));
            for c in 1..classes.rows() {
                let v = dot(x, classes.row(c));
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best
        })
        .collect())
}

/// Top-1 accuracy in percent.
pub fn zero_shot_classify<T: Real>(
    images: &Mat<T>,
    classes: &Mat<T>,
    labels: &[usize],
) -> Result<ZeroShotReport> {
    if labels.len() != images.rows() {
        return Err(Error::Data(format!(
            "{} labels for {} images",
            labels.len(),
            images.rows()
        )));
    }
    if images.rows() == 0 {
        return Err(Error::Data("no images".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes.rows()) {
        return Err(Error::Data(format!(
            "label {l} out of range for {} classes",
            classes.rows()
        )));
    }
    let pred = predict(images, classes)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(ZeroShotReport {
        top1: 100.0 * correct as f64 / images.rows() as f64,
        correct,
        n_images: images.rows(),
        n_classes: classes.rows(),
    })
}

/// Arithmetic mean of per-dataset scores.
pub fn report_average(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("no scores to average".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Rounds half away from zero to `decimals` places.
pub fn round_to(x: f64, decimals: u32) -> f64 {
    let p = 10f64.powi(decimals as i32);
    // nudge by a few ulps so that e.g. 58.45 stored as 58.4499… rounds up
    let y = x * p;
    (y + y.signum() * y.abs() * 4.0 * f64::EPSILON).round() / p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_flipped() {
        let img = Mat::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]);
        let cls = img.clone();
        assert_eq!(zero_shot_classify(&img, &cls, &[0, 1]).unwrap().top1, 100.0);
        assert_eq!(zero_shot_classify(&img, &cls, &[1, 0]).unwrap().top1, 0.0);
        assert!(zero_shot_classify(&img, &cls, &[0, 2]).is_err());
    }

    #[test]
    fn ties_go_low() {
        let img = Mat::from_rows(&[vec![1.0f64, 1.0]]);
        let cls = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(predict(&img, &cls).unwrap(), vec![0]);
    }

    #[test]
    fn averages() {
        assert_eq!(report_average(&[5.5]).unwrap(), 5.5);
        assert_eq!(report_average(&[3.0, 3.0, 3.0]).unwrap(), 3.0);
        assert!(report_average(&[]).is_err());
        assert_eq!(round_to(43.72000000001, 2), 43.72);
        assert_eq!(round_to(2.5, 0), 3.0);
    }
}
