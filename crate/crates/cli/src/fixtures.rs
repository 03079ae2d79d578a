//! A random model, its permuted twin and a dataset labelled by the model.

use std::fs;
use std::path::{Path, PathBuf};

use otfuse_core::graph::{FeatureKind, TargetRule};
use otfuse_core::model::{perturb_model, permute_model, random_permutations};
use otfuse_core::{
    predict, random_model, save_model, synthesize_dataset, write_dataset, ArchSpec, GeneratorSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::settings::ArchKind;

pub const MODEL_A: &str = "model_a.json";
pub const MODEL_B: &str = "model_b.json";
pub const PERMUTATION: &str = "permutation.json";
pub const DATASET: &str = "dataset.jsonl";

/// Relative prediction gap allowed between a model and its exact twin.
const TWIN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub arch: ArchKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub count: usize,
    /// Multiplicative weight noise on the twin; 0 keeps it an exact twin.
    pub noise: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            arch: ArchKind::Gcn,
            input_dim: 8,
            hidden: 16,
            // above the default fusion sample size of 340
            count: 500,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn arch_spec(&self) -> ArchSpec {
        match self.arch {
            ArchKind::Gcn => ArchSpec::small_gcn(self.input_dim, self.hidden, true),
            ArchKind::Mlp => ArchSpec::small_mlp(self.input_dim, self.hidden),
            ArchKind::Zinc => ArchSpec::zinc_gcn(),
        }
    }

    pub fn generator(&self, input_dim: usize) -> GeneratorSpec {
        let mut spec = GeneratorSpec {
            count: self.count,
            feature_dim: input_dim,
            ..Default::default()
        };
        match self.arch {
            ArchKind::Gcn => {}
            ArchKind::Mlp => {
                spec.min_vertices = 1;
                spec.max_vertices = 1;
            }
            ArchKind::Zinc => spec.features = FeatureKind::OneHot,
        }
        spec.target = TargetRule::None;
        spec
    }
}

#[derive(Debug, Serialize)]
struct PermutationRecord<'a> {
    seed: u64,
    /// One permutation per hidden width, in layer order; `b = permute(a)`.
    hidden_permutations: &'a [Vec<usize>],
    noise: f64,
}

/// Paths of the written files.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub model_a: PathBuf,
    pub model_b: PathBuf,
    pub permutation: PathBuf,
    pub dataset: PathBuf,
    /// Largest relative prediction gap between the two models on the dataset.
    pub twin_gap: f64,
}

pub fn generate(spec: &FixtureSpec, dir: &Path) -> Result<Fixtures> {
    if spec.count == 0 || spec.input_dim == 0 || spec.hidden == 0 {
        return Err(HarnessError::usage("--count, --input-dim and --hidden must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(HarnessError::usage("--noise must be a nonnegative number"));
    }
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let arch = spec.arch_spec();
    let a = random_model(&arch, spec.seed)?;
    let perms = random_permutations(&a, &mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e1e_5eed));
    let mut b = permute_model(&a, &perms)?;
    if spec.noise > 0.0 {
        b = perturb_model(&b, spec.noise, spec.seed.wrapping_add(1))?;
    }
    b.metadata.name = format!("{}-twin", a.metadata.name);

    let unlabeled = synthesize_dataset(&spec.generator(arch.input_dim), spec.seed)?;
    let teacher = predict(&a, unlabeled.graphs())?;
    let data = unlabeled.with_targets(&teacher)?;

    let twin = predict(&b, data.graphs())?;
    let twin_gap = teacher
        .iter()
        .zip(&twin)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 { 0.0 } else { (x - y).abs() / scale }
        })
        .fold(0.0, f64::max);
    if spec.noise == 0.0 && twin_gap > TWIN_TOLERANCE {
        return Err(otfuse_core::Error::NumericalFailure(format!(
            "permuted twin differs from the original by {twin_gap:e}"
        ))
        .into());
    }

    let out = Fixtures {
        model_a: dir.join(MODEL_A),
        model_b: dir.join(MODEL_B),
        permutation: dir.join(PERMUTATION),
        dataset: dir.join(DATASET),
        twin_gap,
    };
    save_model(&a, &out.model_a)?;
    save_model(&b, &out.model_b)?;
    let record = PermutationRecord {
        seed: spec.seed,
        hidden_permutations: &perms,
        noise: spec.noise,
    };
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    fs::write(&out.permutation, text).map_err(|e| HarnessError::io(&out.permutation, e))?;
    write_dataset(&data, &out.dataset)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use otfuse_core::{evaluate_mae, load_dataset, load_model, DatasetFormat};

    #[test]
    fn twin_matches_and_teacher_scores_zero() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            count: 20,
            seed: 5,
            ..Default::default()
        };
        let f = generate(&spec, dir.path()).unwrap();
        assert!(f.twin_gap <= TWIN_TOLERANCE);
        let a = load_model(&f.model_a).unwrap();
        let data = load_dataset(&f.dataset, DatasetFormat::JsonLines).unwrap();
        assert_eq!(data.len(), 20);
        assert_eq!(evaluate_mae(&a, &data).unwrap(), 0.0);
    }

    #[test]
    fn mlp_fixtures_use_single_vertex_graphs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            arch: ArchKind::Mlp,
            count: 10,
            ..Default::default()
        };
        let f = generate(&spec, dir.path()).unwrap();
        let a = load_model(&f.model_a).unwrap();
        assert!(a.is_mlp());
        let data = load_dataset(&f.dataset, DatasetFormat::JsonLines).unwrap();
        assert!(data.graphs().iter().all(|g| g.num_vertices() == 1));
    }

    #[test]
    fn noisy_twin_is_not_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec {
            count: 10,
            noise: 0.01,
            ..Default::default()
        };
        assert!(generate(&spec, dir.path()).unwrap().twin_gap > 0.0);
    }
}
