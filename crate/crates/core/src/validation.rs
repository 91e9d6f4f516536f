//! K-fold and leave-one-out harnesses.

use crate::error::{Error, Result};
use crate::estimator::{fit_blocks, predict_count, CountPrediction, FeatureRow, RidgeOptions};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `0..n` into `k` contiguous test folds whose sizes differ by at most
/// one. With `k == n` every fold holds out a single item.
pub fn fold_indices(n: usize, k: usize) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidParameter(format!("k = {k} exceeds the {n} available items")));
    }
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for index in 0..k {
        let len = base + usize::from(index < extra);
        let test: Vec<usize> = (start..start + len).collect();
        let train: Vec<usize> = (0..start).chain(start + len..n).collect();
        folds.push(Fold { index, train, test });
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub fold: Fold,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldScore>,
    /// `(1/k) sum_i e_i`
    pub mean: f64,
}

/// For each fold, trains on every item outside it and scores the held-out items.
pub fn kfold_cross_validate<T, M>(
    items: &[T],
    k: usize,
    mut train_fn: impl FnMut(&[&T]) -> Result<M>,
    mut eval_fn: impl FnMut(&M, &[&T]) -> Result<f64>,
) -> Result<CrossValidation> {
    let folds = fold_indices(items.len(), k)?;
    let mut scored = Vec::with_capacity(folds.len());
    for fold in folds {
        let train: Vec<&T> = fold.train.iter().map(|&i| &items[i]).collect();
        let test: Vec<&T> = fold.test.iter().map(|&i| &items[i]).collect();
        let model = train_fn(&train)?;
        let score = eval_fn(&model, &test)?;
        scored.push(FoldScore { fold, score });
    }
    let mean = scored.iter().map(|f| f.score).sum::<f64>() / scored.len() as f64;
    Ok(CrossValidation { folds: scored, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvPrediction {
    pub block_id: String,
    pub gt_count: f64,
    pub det_count: f64,
    pub training_size: usize,
    pub prediction: CountPrediction,
}

/// Leave-one-out over blocks: block `i` is predicted by a corrector fitted
/// on all other rows.
pub fn loocv_regressor(rows: &[FeatureRow], opts: RidgeOptions) -> Result<Vec<LoocvPrediction>> {
    if rows.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "leave-one-out needs at least 3 blocks, got {}",
            rows.len()
        )));
    }
    for r in rows {
        r.features.values()?;
        if r.gt_count.is_none() {
            return Err(Error::IncompleteFeatures(format!("{} (no gt_count)", r.features.block_id)));
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    for fold in fold_indices(rows.len(), rows.len())? {
        let feats: Vec<_> = fold.train.iter().map(|&i| rows[i].features.clone()).collect();
        let targets: Vec<f64> = fold.train.iter().map(|&i| rows[i].gt_count.unwrap()).collect();
        let model = fit_blocks(&feats, &targets, opts)?;
        let held = &rows[fold.test[0]];
        out.push(LoocvPrediction {
            block_id: held.features.block_id.clone(),
            gt_count: held.gt_count.unwrap(),
            det_count: held.features.det_count,
            training_size: fold.train.len(),
            prediction: predict_count(&model, &held.features)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::BlockFeatureVector;

    fn row(id: usize, gt: f64) -> FeatureRow {
        let i = id as f64;
        FeatureRow {
            features: BlockFeatureVector {
                block_id: format!("B{id}"),
                det_count: 100.0 + 37.0 * i,
                det_density: 10.0 + (i * 0.9).sin() * 3.0,
                ft_density: Some(12.0 + (i * i * 0.07).cos() * 2.0),
                area_ha: 2.0 + (i * 0.31).exp() % 9.0,
            },
            gt_count: Some(gt),
        }
    }

    #[test]
    fn six_folds_hold_out_each_block() {
        let folds = fold_indices(6, 6).unwrap();
        assert_eq!(folds.len(), 6);
        for (i, f) in folds.iter().enumerate() {
            assert_eq!(f.test, vec![i]);
            assert!(!f.train.contains(&i));
            assert_eq!(f.train.len(), 5);
        }
    }

    #[test]
    fn uneven_folds() {
        let folds = fold_indices(7, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
    }

    #[test]
    fn rejects_bad_k() {
        assert!(fold_indices(6, 1).is_err());
        assert!(fold_indices(3, 4).is_err());
    }

    #[test]
    fn constant_scores_average() {
        let items: Vec<u32> = (0..6).collect();
        let cv = kfold_cross_validate(&items, 6, |_| Ok(()), |_, _| Ok(0.73)).unwrap();
        assert_eq!(cv.folds.len(), 6);
        assert!((cv.mean - 0.73).abs() < 1e-15);
    }

    #[test]
    fn train_fn_never_sees_test_item() {
        let items: Vec<usize> = (0..9).collect();
        let cv = kfold_cross_validate(
            &items,
            9,
            |train| Ok(train.iter().map(|&&v| v).collect::<Vec<_>>()),
            |seen, test| {
                assert!(test.iter().all(|t| !seen.contains(t)));
                Ok(seen.len() as f64)
            },
        )
        .unwrap();
        assert_eq!(cv.mean, 8.0);
    }

    #[test]
    fn loocv_trains_on_all_but_one() {
        let rows: Vec<_> = (0..18).map(|i| row(i, 1000.0 + 50.0 * i as f64)).collect();
        let preds = loocv_regressor(&rows, RidgeOptions::default()).unwrap();
        assert_eq!(preds.len(), 18);
        assert!(preds.iter().all(|p| p.training_size == 17));
        assert_eq!(preds[4].block_id, "B4");
    }

    #[test]
    fn loocv_constant_target_with_intercept() {
        let rows: Vec<_> = (0..10).map(|i| row(i, 777.0)).collect();
        let opts = RidgeOptions {
            lambda: 0.0,
            intercept: true,
            standardize: false,
        };
        for p in loocv_regressor(&rows, opts).unwrap() {
            assert!((p.prediction.raw - 777.0).abs() < 1e-8, "{}", p.prediction.raw);
        }
    }

    #[test]
    fn loocv_rejects_incomplete() {
        let mut rows: Vec<_> = (0..5).map(|i| row(i, 10.0)).collect();
        rows[2].features.ft_density = None;
        assert!(matches!(
            loocv_regressor(&rows, RidgeOptions::default()),
            Err(Error::IncompleteFeatures(_))
        ));
        let mut rows: Vec<_> = (0..5).map(|i| row(i, 10.0)).collect();
        rows[0].gt_count = None;
        assert!(loocv_regressor(&rows, RidgeOptions::default()).is_err());
        assert!(loocv_regressor(&rows[..2], RidgeOptions::default()).is_err());
    }
}
