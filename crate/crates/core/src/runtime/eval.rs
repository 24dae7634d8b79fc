use std::io::Write;
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::{infer, InferConfig};
use super::plot::plot_eval;
use super::write_json;
use crate::error::{Error, Result};
use crate::grasp::rotation::quaternion_from_matrix;
use crate::grasp::GraspModel;
use crate::scene::{
    analytic_grasp_labels, evaluate_grasp, scene_seed, synth_scene, tsdf_from_scene, GripperConfig, Noise, SceneKind, SceneSpec,
    TsdfVolume,
};
use crate::tensor::{ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    /// Declutter scenes per seed.
    pub scenes: usize,
    pub kind: SceneKind,
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise: Noise,
    pub max_consecutive_failures: usize,
    /// Hard cap per scene; 0 means twice the object count plus two.
    pub max_attempts: usize,
    pub oracle_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            scenes: 10,
            kind: SceneKind::PileLike,
            min_objects: 2,
            max_objects: 4,
            noise: Noise::None,
            max_consecutive_failures: 2,
            max_attempts: 0,
            oracle_samples: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.scenes == 0 {
            return Err(Error::Config("evaluation needs at least one seed and one scene".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "invalid evaluation object range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_consecutive_failures == 0 {
            return Err(Error::Config("max_consecutive_failures must be positive".into()));
        }
        Ok(())
    }

    /// Declutter scenes of one seed.
    pub fn scenes_for(&self, seed: u64) -> Result<Vec<SceneSpec>> {
        (0..self.scenes)
            .map(|i| {
                let s = scene_seed(seed ^ 0x5eed_e7a1, i);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let count = rng.gen_range(self.min_objects..=self.max_objects);
                synth_scene(s, self.kind, count)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub position: [f64; 3],
    pub rotation: Matrix3<f64>,
    pub score: f64,
}

/// Chooses the next grasp on the current scene, or `None` for no grasp.
pub trait Policy {
    fn propose(&mut self, scene: &SceneSpec, tsdf: &TsdfVolume) -> Result<Option<Proposal>>;
}

/// Top grasp of [`infer`].
pub struct ModelPolicy<'a, T: Scalar> {
    pub model: &'a GraspModel,
    pub store: &'a ParamStore<T>,
    pub config: InferConfig,
    pub gripper: GripperConfig,
}

impl<T: Scalar> Policy for ModelPolicy<'_, T> {
    fn propose(&mut self, _scene: &SceneSpec, tsdf: &TsdfVolume) -> Result<Option<Proposal>> {
        let res = infer(self.model, self.store, &self.config, &self.gripper, tsdf)?;
        self.config.seed = self.config.seed.wrapping_add(1);
        Ok(res.grasps.first().map(|g| Proposal { position: g.position, rotation: g.matrix(), score: g.quality }))
    }
}

/// Reads the analytic labels of the current scene and returns a successful one.
pub struct OraclePolicy {
    pub gripper: GripperConfig,
    pub samples_per_object: usize,
}

impl Policy for OraclePolicy {
    fn propose(&mut self, scene: &SceneSpec, _tsdf: &TsdfVolume) -> Result<Option<Proposal>> {
        Ok(analytic_grasp_labels(scene, &self.gripper, self.samples_per_object)
            .into_iter()
            .filter(|l| l.success)
            .map(|l| Proposal { position: l.position, rotation: l.matrix(), score: 1.0 })
            .find(|p| evaluate_grasp(scene, &self.gripper, p.position, &p.rotation).success))
    }
}

/// Closes on empty space above the workspace.
pub struct AlwaysFailPolicy;

impl Policy for AlwaysFailPolicy {
    fn propose(&mut self, scene: &SceneSpec, _tsdf: &TsdfVolume) -> Result<Option<Proposal>> {
        let h = scene.workspace / 2.0;
        Ok(Some(Proposal { position: [h, h, scene.workspace - 0.01], rotation: Matrix3::identity(), score: 0.0 }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub seed: u64,
    pub scene: usize,
    pub attempt: usize,
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub score: f64,
    pub success: bool,
    pub object: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Cleared,
    ConsecutiveFailures,
    NoGrasp,
    AttemptLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclutterRun {
    pub objects: usize,
    pub removed: usize,
    pub attempts: Vec<AttemptLog>,
    pub stop: StopReason,
}

/// Select, test, remove on success; stop after consecutive failures, when no
/// grasp is proposed, or when the scene is empty.
pub fn declutter(
    scene: &SceneSpec,
    policy: &mut dyn Policy,
    cfg: &EvalConfig,
    gripper: &GripperConfig,
    grid: usize,
    ids: (u64, usize),
) -> Result<DeclutterRun> {
    let objects = scene.primitives.len();
    let limit = if cfg.max_attempts == 0 { 2 * objects + 2 } else { cfg.max_attempts };
    let mut scene = scene.clone();
    let mut attempts = Vec::new();
    let mut failures = 0;
    let mut removed = 0;
    let stop = loop {
        if scene.primitives.is_empty() {
            break StopReason::Cleared;
        }
        if attempts.len() >= limit {
            break StopReason::AttemptLimit;
        }
        let tsdf = tsdf_from_scene(&scene, grid, cfg.noise)?;
        let Some(p) = policy.propose(&scene, &tsdf)? else {
            break StopReason::NoGrasp;
        };
        let outcome = evaluate_grasp(&scene, gripper, p.position, &p.rotation);
        attempts.push(AttemptLog {
            seed: ids.0,
            scene: ids.1,
            attempt: attempts.len(),
            position: p.position,
            rotation: quaternion_from_matrix(&p.rotation),
            score: p.score,
            success: outcome.success,
            object: outcome.object,
        });
        match (outcome.success, outcome.object) {
            (true, Some(i)) => {
                scene = scene.without(i);
                removed += 1;
                failures = 0;
            }
            _ => {
                failures += 1;
                if failures >= cfg.max_consecutive_failures {
                    break StopReason::ConsecutiveFailures;
                }
            }
        }
    };
    Ok(DeclutterRun { objects, removed, attempts, stop })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub attempts: usize,
    pub successes: usize,
    pub objects: usize,
    pub removed: usize,
    /// successes / attempts; zero when nothing was attempted.
    pub gsr: f64,
    /// removed / objects.
    pub dr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<SeedSummary>,
    pub gsr_mean: f64,
    pub gsr_std: f64,
    pub dr_mean: f64,
    pub dr_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EvalReport {
    pub fn from_seeds(seeds: Vec<SeedSummary>) -> Self {
        let (gsr_mean, gsr_std) = mean_std(&seeds.iter().map(|s| s.gsr).collect::<Vec<_>>());
        let (dr_mean, dr_std) = mean_std(&seeds.iter().map(|s| s.dr).collect::<Vec<_>>());
        Self { seeds, gsr_mean, gsr_std, dr_mean, dr_std }
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in &self.seeds {
            out.push_str(&format!(
                "seed {:>3}: GSR {:6.2}% ({}/{})  DR {:6.2}% ({}/{})\n",
                s.seed,
                100.0 * s.gsr,
                s.successes,
                s.attempts,
                100.0 * s.dr,
                s.removed,
                s.objects
            ));
        }
        out.push_str(&format!(
            "GSR-proxy {:.2} ± {:.2}%  DR-proxy {:.2} ± {:.2}%\n",
            100.0 * self.gsr_mean,
            100.0 * self.gsr_std,
            100.0 * self.dr_mean,
            100.0 * self.dr_std
        ));
        out
    }
}

/// Runs the declutter loop over every seed. `make_policy` builds the policy of
/// one seed; `scenes` overrides the generated scenes. With `out`, writes
/// `attempts.jsonl`, `eval.json` and `eval.svg`.
pub fn evaluate<'p>(
    cfg: &EvalConfig,
    gripper: &GripperConfig,
    grid: usize,
    scenes: Option<&[SceneSpec]>,
    make_policy: &mut dyn FnMut(u64) -> Box<dyn Policy + 'p>,
    out: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("attempts.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let generated;
        let list = match scenes {
            Some(s) => s,
            None => {
                generated = cfg.scenes_for(seed)?;
                &generated
            }
        };
        let mut policy = make_policy(seed);
        let mut sum = SeedSummary { seed, attempts: 0, successes: 0, objects: 0, removed: 0, gsr: 0.0, dr: 0.0 };
        for (i, scene) in list.iter().enumerate() {
            let run = declutter(scene, policy.as_mut(), cfg, gripper, grid, (seed, i))?;
            sum.attempts += run.attempts.len();
            sum.successes += run.attempts.iter().filter(|a| a.success).count();
            sum.objects += run.objects;
            sum.removed += run.removed;
            if let Some((f, p)) = log.as_mut() {
                for a in &run.attempts {
                    writeln!(f, "{}", serde_json::to_string(a)?).map_err(|e| Error::io(&*p, e))?;
                }
            }
        }
        if sum.attempts > 0 {
            sum.gsr = sum.successes as f64 / sum.attempts as f64;
        }
        if sum.objects > 0 {
            sum.dr = sum.removed as f64 / sum.objects as f64;
        }
        seeds.push(sum);
    }
    let report = EvalReport::from_seeds(seeds);
    if let Some(dir) = out {
        write_json(&dir.join("eval.json"), &report)?;
        plot_eval(&dir.join("eval.svg"), &report)?;
    }
    Ok(report)
}
