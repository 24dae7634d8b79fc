use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grasp::{analytic_grasp_labels, graspness_samples, GraspLabel, GraspnessSample, GripperConfig};
use super::{occupancy_samples, synth_scene, tsdf_from_scene, Noise, OccupancySample, SceneKind, SceneSpec, TsdfVolume};
use crate::error::{Error, Result};
use crate::grasp::GraspBatch;

const MAGIC: &[u8; 8] = b"EQGSCENE";
const VERSION: u8 = 1;
const INDEX: &str = "index.json";
const PLACEMENT_RETRIES: u64 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub scenes: usize,
    pub grid: usize,
    pub kind: SceneKind,
    pub min_objects: usize,
    pub max_objects: usize,
    pub samples_per_object: usize,
    pub occupancy_samples: usize,
    pub graspness_samples: usize,
    pub noise: Noise,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    pub gripper: GripperConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            grid: 40,
            kind: SceneKind::PackedLike,
            min_objects: 1,
            max_objects: 4,
            samples_per_object: 4,
            occupancy_samples: 2048,
            graspness_samples: 256,
            noise: Noise::None,
            seed: 0,
            workers: 0,
            gripper: GripperConfig::default(),
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(Error::Config(format!(
                "object range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.grid < 8 || self.occupancy_samples == 0 {
            return Err(Error::Config("grid must be >= 8 and occupancy samples >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub spec: SceneSpec,
    pub tsdf: TsdfVolume,
    pub labels: Vec<GraspLabel>,
    pub occupancy: Vec<OccupancySample>,
    pub graspness: Vec<GraspnessSample>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scene `index` in a dataset.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64))
}

impl SceneRecord {
    /// Builds scene `index` of a dataset; placement failures retry with
    /// derived seeds.
    pub fn generate(cfg: &GenerateConfig, index: usize) -> Result<Self> {
        let base = scene_seed(cfg.seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut last = None;
        for attempt in 0..PLACEMENT_RETRIES {
            let seed = splitmix(base.wrapping_add(attempt));
            match synth_scene(seed, cfg.kind, count) {
                Ok(spec) => return Self::from_spec(cfg, spec),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn from_spec(cfg: &GenerateConfig, spec: SceneSpec) -> Result<Self> {
        let tsdf = tsdf_from_scene(&spec, cfg.grid, cfg.noise)?;
        let labels = analytic_grasp_labels(&spec, &cfg.gripper, cfg.samples_per_object);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0cc0_0000_0000_0003);
        let occupancy = occupancy_samples(&spec, cfg.occupancy_samples, cfg.grid, &mut rng);
        let graspness = graspness_samples(&spec, &cfg.gripper, cfg.graspness_samples, &mut rng);
        Ok(Self { spec, tsdf, labels, occupancy, graspness })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn section(&mut self, body: Writer) {
        self.0.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data(format!("truncated scene record at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
    fn point(&mut self) -> Result<[f64; 3]> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
    fn section(&mut self) -> Result<Reader<'a>> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        Ok(Reader { buf: self.take(n)?, pos: 0 })
    }
    fn done(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Data(format!("{} trailing bytes in {what} section", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn bool_byte(v: u8) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Data(format!("invalid flag byte {v}"))),
    }
}

/// Magic, version byte, then length-prefixed sections: scene JSON, TSDF,
/// grasp labels, occupancy samples, graspness samples.
pub fn encode_record(r: &SceneRecord) -> Result<Vec<u8>> {
    let mut w = Writer(MAGIC.to_vec());
    w.u8(VERSION);
    w.section(Writer(serde_json::to_vec(&r.spec)?));

    let mut t = Writer(Vec::new());
    t.u32(r.tsdf.size);
    t.f64(r.tsdf.truncation);
    r.tsdf.values.iter().for_each(|&v| t.f32(v));
    w.section(t);

    let mut l = Writer(Vec::new());
    l.u32(r.labels.len());
    for g in &r.labels {
        g.position.iter().chain(&g.rotation).for_each(|&v| l.f64(v));
        l.u8(g.success as u8);
        l.f64(g.width);
    }
    w.section(l);

    let mut o = Writer(Vec::new());
    o.u32(r.occupancy.len());
    for s in &r.occupancy {
        s.point.iter().for_each(|&v| o.f64(v));
        o.u8(s.occupied as u8);
        o.u8(s.near_surface as u8);
    }
    w.section(o);

    let mut a = Writer(Vec::new());
    a.u32(r.graspness.len());
    for s in &r.graspness {
        s.point.iter().for_each(|&v| a.f64(v));
        a.u8(s.graspable as u8);
    }
    w.section(a);
    Ok(w.0)
}

pub fn decode_record(buf: &[u8]) -> Result<SceneRecord> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a scene record (bad magic)".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported scene record version {version}")));
    }
    let spec_bytes = r.section()?;
    let spec: SceneSpec = serde_json::from_slice(spec_bytes.buf)?;

    let mut t = r.section()?;
    let size = t.u32()?;
    let truncation = t.f64()?;
    let values = (0..size * size * size).map(|_| t.f32()).collect::<Result<Vec<_>>>()?;
    t.done("tsdf")?;

    let mut l = r.section()?;
    let n = l.u32()?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let position = l.point()?;
        let rotation = [l.f64()?, l.f64()?, l.f64()?, l.f64()?];
        let success = bool_byte(l.u8()?)?;
        labels.push(GraspLabel { position, rotation, success, width: l.f64()? });
    }
    l.done("labels")?;

    let mut o = r.section()?;
    let n = o.u32()?;
    let mut occupancy = Vec::with_capacity(n);
    for _ in 0..n {
        let point = o.point()?;
        occupancy.push(OccupancySample { point, occupied: bool_byte(o.u8()?)?, near_surface: bool_byte(o.u8()?)? });
    }
    o.done("occupancy")?;

    let mut a = r.section()?;
    let n = a.u32()?;
    let mut graspness = Vec::with_capacity(n);
    for _ in 0..n {
        let point = a.point()?;
        graspness.push(GraspnessSample { point, graspable: bool_byte(a.u8()?)? });
    }
    a.done("graspness")?;
    r.done("record")?;
    Ok(SceneRecord { spec, tsdf: TsdfVolume { size, truncation, values }, labels, occupancy, graspness })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_record(path: &Path, r: &SceneRecord) -> Result<()> {
    write_atomic(path, &encode_record(r)?)
}

pub fn read_record(path: &Path) -> Result<SceneRecord> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_record(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u8,
    pub scenes: usize,
    pub grid: usize,
    pub files: Vec<String>,
    pub config: GenerateConfig,
}

#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub written: Vec<usize>,
    pub skipped: Vec<usize>,
    pub index: DatasetIndex,
}

fn scene_file(i: usize) -> String {
    format!("scenes/{i:06}.bin")
}

/// Writes `cfg.scenes` records and then the index. With `resume`, records
/// that already parse are kept.
pub fn generate_dataset(dir: &Path, cfg: &GenerateConfig, resume: bool) -> Result<GenerateReport> {
    cfg.validate()?;
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    let index_path = dir.join(INDEX);
    if index_path.exists() {
        fs::remove_file(&index_path).map_err(|e| Error::io(&index_path, e))?;
    }
    let todo: Vec<usize> = (0..cfg.scenes)
        .filter(|&i| !(resume && read_record(&dir.join(scene_file(i))).is_ok()))
        .collect();
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .clamp(1, todo.len().max(1));
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let todo = &todo;
                s.spawn(move || -> Result<()> {
                    for &i in todo.iter().skip(w).step_by(workers) {
                        let rec = SceneRecord::generate(cfg, i)?;
                        write_record(&dir.join(scene_file(i)), &rec)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let index = DatasetIndex {
        version: VERSION,
        scenes: cfg.scenes,
        grid: cfg.grid,
        files: (0..cfg.scenes).map(scene_file).collect(),
        config: cfg.clone(),
    };
    write_atomic(&index_path, &serde_json::to_vec_pretty(&index)?)?;
    let skipped = (0..cfg.scenes).filter(|i| !todo.contains(i)).collect();
    Ok(GenerateReport { written: todo, skipped, index })
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_slice(&text)?;
        if index.files.len() != index.scenes {
            return Err(Error::Data(format!(
                "index lists {} files for {} scenes",
                index.files.len(),
                index.scenes
            )));
        }
        if let Some(f) = index.files.iter().find(|f| !dir.join(f).is_file()) {
            return Err(Error::Data(format!("scene file {f} is missing")));
        }
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn len(&self) -> usize {
        self.index.scenes
    }

    pub fn is_empty(&self) -> bool {
        self.index.scenes == 0
    }

    pub fn record(&self, i: usize) -> Result<SceneRecord> {
        let f = self
            .index
            .files
            .get(i)
            .ok_or_else(|| Error::Data(format!("scene {i} out of range ({} scenes)", self.index.scenes)))?;
        read_record(&self.dir.join(f))
    }
}

/// Maximum sample counts drawn from one scene per training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchLimits {
    pub graspness: usize,
    pub grasps: usize,
    pub occupancy: usize,
}

impl Default for BatchLimits {
    fn default() -> Self {
        Self { graspness: 256, grasps: 64, occupancy: 256 }
    }
}

fn pick<T: Clone>(items: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    let mut idx = sample(rng, items.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Training batch of one scene. Graspness targets combine the probe samples
/// with label centres (graspable if any approach succeeds); grasp samples
/// are balanced between successes and failures where possible.
pub fn batch_from_record(r: &SceneRecord, limits: &BatchLimits, rng: &mut impl Rng) -> GraspBatch {
    let mut centres: Vec<([f64; 3], bool)> = Vec::new();
    let mut seen: HashMap<[u64; 3], usize> = HashMap::new();
    for l in &r.labels {
        let key = l.position.map(f64::to_bits);
        match seen.get(&key) {
            Some(&i) => centres[i].1 |= l.success,
            None => {
                seen.insert(key, centres.len());
                centres.push((l.position, l.success));
            }
        }
    }
    centres.extend(r.graspness.iter().map(|s| (s.point, s.graspable)));
    let centres = pick(&centres, limits.graspness, rng);

    let (pos, neg): (Vec<&GraspLabel>, Vec<&GraspLabel>) = r.labels.iter().partition(|l| l.success);
    let n_pos = (limits.grasps / 2).max(limits.grasps.saturating_sub(neg.len())).min(pos.len());
    let mut grasps = pick(&pos, n_pos, rng);
    grasps.extend(pick(&neg, limits.grasps - grasps.len(), rng));

    let occ = pick(&r.occupancy, limits.occupancy, rng);
    GraspBatch {
        positions: centres.iter().map(|c| c.0).collect(),
        graspness: centres.iter().map(|c| c.1 as u8 as f64).collect(),
        grasp_points: grasps.iter().map(|l| l.position).collect(),
        grasp_rotations: grasps.iter().map(|l| l.matrix()).collect(),
        grasp_success: grasps.iter().map(|l| l.success as u8 as f64).collect(),
        occupancy_points: occ.iter().map(|s| s.point).collect(),
        occupancy: occ.iter().map(|s| s.occupied as u8 as f64).collect(),
    }
}
