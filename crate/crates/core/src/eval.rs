//! Scores a trained model against fixture pairs: PSNR and SSIM of the rainy
//! input and of the restored output, both against the hidden clean truth,
//! plus per-image inference wall time. The method never trains on these
//! pairs; they exist so the harness can quantify what the paired corpora in
//! the literature would measure qualitatively.

use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::derain::{derain, DerainModel};
use crate::imaging::{load_png, psnr, Image, ImagingError};
use crate::metrics::ssim_index;
use crate::trainer::{load_corpus, load_derain_checkpoint, TrainerError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no clean truth for {}", path.display())]
    MissingTruth { path: PathBuf },
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// One fixture pair's scores. Metrics compare against the clean truth;
/// `seconds` is the wall time of the restoration forward pass alone.
#[derive(Clone, Debug)]
pub struct PairScore {
    pub name: String,
    pub rainy_psnr: f64,
    pub rainy_ssim: f64,
    pub derained_psnr: f64,
    pub derained_ssim: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub pairs: Vec<PairScore>,
    pub mean_rainy_psnr: f64,
    pub mean_rainy_ssim: f64,
    pub mean_derained_psnr: f64,
    pub mean_derained_ssim: f64,
    pub mean_seconds: f64,
}

impl EvalReport {
    /// Fixed-width text table, one row per pair plus a mean row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>9} {:>10} {:>12} {:>13} {:>8}\n",
            "pair", "rainy dB", "rainy SSIM", "derained dB", "derained SSIM", "sec"
        ));
        let row = |out: &mut String, name: &str, s: [f64; 5]| {
            out.push_str(&format!(
                "{:<22} {:>9.3} {:>10.4} {:>12.3} {:>13.4} {:>8.3}\n",
                name, s[0], s[1], s[2], s[3], s[4]
            ));
        };
        for p in &self.pairs {
            row(
                &mut out,
                &p.name,
                [p.rainy_psnr, p.rainy_ssim, p.derained_psnr, p.derained_ssim, p.seconds],
            );
        }
        row(
            &mut out,
            "mean",
            [
                self.mean_rainy_psnr,
                self.mean_rainy_ssim,
                self.mean_derained_psnr,
                self.mean_derained_ssim,
                self.mean_seconds,
            ],
        );
        out
    }
}

/// Restores one image and reports the forward-pass wall time.
pub fn timed_derain(model: &DerainModel, rainy: &Image) -> (Image, f64) {
    let start = Instant::now();
    let (restored, _) = derain(model, rainy.tensor());
    let seconds = start.elapsed().as_secs_f64();
    (Image::from_tensor(restored), seconds)
}

/// Scores `model` on every pair under `fixture_dir` (expects the generator's
/// `rainy/` and `clean/` layout; pairs share file names).
pub fn evaluate_model(model: &DerainModel, fixture_dir: &Path) -> Result<EvalReport, EvalError> {
    let rainy_set = load_corpus(&fixture_dir.join("rainy"))?;
    let mut pairs = Vec::with_capacity(rainy_set.len());
    let mut sums = [0.0f64; 5];
    for (path, rainy) in &rainy_set {
        let name = path
            .file_name()
            .expect("corpus entries are files")
            .to_string_lossy()
            .into_owned();
        let truth_path = fixture_dir.join("clean").join(&name);
        if !truth_path.is_file() {
            return Err(EvalError::MissingTruth { path: truth_path });
        }
        let clean = load_png(&truth_path)?;
        let (restored, seconds) = timed_derain(model, rainy);
        let score = PairScore {
            name,
            rainy_psnr: psnr(rainy, &clean),
            rainy_ssim: ssim_index(rainy.tensor(), clean.tensor()),
            derained_psnr: psnr(&restored, &clean),
            derained_ssim: ssim_index(restored.tensor(), clean.tensor()),
            seconds,
        };
        sums[0] += score.rainy_psnr;
        sums[1] += score.rainy_ssim;
        sums[2] += score.derained_psnr;
        sums[3] += score.derained_ssim;
        sums[4] += score.seconds;
        pairs.push(score);
    }
    let n = pairs.len() as f64;
    Ok(EvalReport {
        pairs,
        mean_rainy_psnr: sums[0] / n,
        mean_rainy_ssim: sums[1] / n,
        mean_derained_psnr: sums[2] / n,
        mean_derained_ssim: sums[3] / n,
        mean_seconds: sums[4] / n,
    })
}

/// Loads a trained checkpoint and scores it; the detail block in the file is
/// ignored because restoration runs on the base network alone.
pub fn evaluate(checkpoint: &Path, fixture_dir: &Path) -> Result<EvalReport, EvalError> {
    let state = load_derain_checkpoint(checkpoint)?;
    evaluate_model(&state.model, fixture_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derain::DetailBlock;
    use crate::fixtures::{gen_fixtures, FixtureSpec};
    use crate::tensor::Tensor;
    use crate::trainer::{save_derain_checkpoint, Adam, TrainConfig};
    use rand::SeedableRng;

    fn spec() -> FixtureSpec {
        FixtureSpec {
            count: 3,
            height: 32,
            width: 32,
            seed: 5,
            ..FixtureSpec::default()
        }
    }

    fn zeroed_model() -> DerainModel {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let mut model = DerainModel::new(&mut rng);
        for (_, p) in model.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        model
    }

    #[test]
    fn zero_weight_model_scores_derained_identical_to_rainy() {
        let dir = tempfile::tempdir().unwrap();
        gen_fixtures(&spec(), dir.path()).unwrap();
        // Zero weights make the residual head output tanh(0) = 0, so the
        // restoration is the input untouched.
        let report = evaluate_model(&zeroed_model(), dir.path()).unwrap();
        assert_eq!(report.pairs.len(), 3);
        for p in &report.pairs {
            assert_eq!(p.rainy_psnr, p.derained_psnr, "{}", p.name);
            assert_eq!(p.rainy_ssim, p.derained_ssim, "{}", p.name);
        }
    }

    #[test]
    fn checkpoint_evaluation_matches_in_memory_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        gen_fixtures(&spec(), dir.path()).unwrap();
        let model = zeroed_model();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let detail = DetailBlock::new(&mut rng);
        let path = dir.path().join("model.ckpt");
        save_derain_checkpoint(&path, &model, &detail, &Adam::new(), 0, &TrainConfig::default())
            .unwrap();
        let from_file = evaluate(&path, dir.path()).unwrap();
        let in_memory = evaluate_model(&model, dir.path()).unwrap();
        for (a, b) in from_file.pairs.iter().zip(&in_memory.pairs) {
            assert_eq!(a.rainy_psnr, b.rainy_psnr);
            assert_eq!(a.derained_psnr, b.derained_psnr);
        }
    }

    #[test]
    fn a_pair_without_clean_truth_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        gen_fixtures(&spec(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("clean/fixture-00001.png")).unwrap();
        let err = evaluate_model(&zeroed_model(), dir.path()).unwrap_err();
        assert!(
            matches!(&err, EvalError::MissingTruth { path } if path.ends_with("fixture-00001.png")),
            "{err}"
        );
    }

    #[test]
    fn the_table_carries_every_pair_and_a_mean_row() {
        let dir = tempfile::tempdir().unwrap();
        gen_fixtures(&spec(), dir.path()).unwrap();
        let report = evaluate_model(&zeroed_model(), dir.path()).unwrap();
        let table = report.table();
        for p in &report.pairs {
            assert!(table.contains(&p.name), "missing row for {}", p.name);
        }
        assert_eq!(table.lines().count(), 1 + 3 + 1);
        assert!(table.lines().last().unwrap().starts_with("mean"));
    }
}
