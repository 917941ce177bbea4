//! Command implementations behind the `diffrepro` binary.
//!
//! Each command reads a [`RunConfig`], writes its outputs plus
//! `config.resolved.txt` into the output directory, and maps failures to exit
//! code 1 (configuration or input) or 2 (numerical or runtime).

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use diffrepro::experiments::{hyperplane_map, memorization_sweep, HyperplaneGrid};
use diffrepro::image::tile;
use diffrepro::inverse::{
    apply_mask, apply_mask_noisy, dps_inpaint, observed_mae, DpsConfig, InpaintMask,
};
use diffrepro::metrics::{
    gl_score, score_matrix, EmbeddingTable, Metric, SampleSet, SimilarityBackend,
};
use diffrepro::rng::noise_for_id;
use diffrepro::sampler::{encode_batch, generate_batch};
use diffrepro::{
    load_dataset, read_tensor, write_tensor, Dataset, Error, Grid, Image, Method, NoisePredictor,
    OptimalDenoiser, SamplerConfig, Schedule, SeededRng, Shape, Tensor,
};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteInput | Error::NonFiniteState { .. } | Error::ZeroNormDescriptor => {
                CliError::Runtime(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Common {
    /// Loads the config file (or defaults) and applies `--seed`.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common.out.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    write_text(&dir.join("config.resolved.txt"), &cfg.render())?;
    Ok(dir)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn parse_shape(raw: &str) -> Result<Shape> {
    let dims: Vec<usize> = raw
        .split('x')
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            CliError::Config(format!("dataset.synthetic_shape = {raw:?}: expected HxWxC"))
        })?;
    match dims.as_slice() {
        [h, w, c] => Ok(Shape::new(*h, *w, *c)?),
        _ => Err(CliError::Config(format!(
            "dataset.synthetic_shape = {raw:?}: expected HxWxC"
        ))),
    }
}

pub fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let seed: u64 = cfg.get("seed")?;
    if let Some(n) = cfg.get_opt::<usize>("dataset.synthetic")? {
        return Ok(Dataset::synthetic(
            n,
            parse_shape(cfg.raw("dataset.synthetic_shape"))?,
            seed,
        )?);
    }
    let path: PathBuf = cfg.get("dataset.path")?;
    Ok(load_dataset(
        path,
        cfg.get_opt("dataset.limit")?,
        cfg.get_opt("dataset.shuffle_seed")?,
    )?)
}

pub fn schedule(cfg: &RunConfig) -> Result<Schedule> {
    let s = Schedule {
        kind: cfg.get("schedule.kind")?,
        beta_min: cfg.get("schedule.beta_min")?,
        beta_max: cfg.get("schedule.beta_max")?,
        sigma_min: cfg.get("schedule.sigma_min")?,
        sigma_max: cfg.get("schedule.sigma_max")?,
        t_min: cfg.get("schedule.t_min")?,
        t_max: cfg.get("schedule.t_max")?,
    };
    s.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(s)
}

fn sampler_config(cfg: &RunConfig, sched: &Schedule) -> Result<SamplerConfig> {
    let method: Method = cfg.get("sampler.method")?;
    let grid: Grid = cfg.get("sampler.grid")?;
    Ok(SamplerConfig::generation(method, cfg.get("sampler.steps")?, sched).with_grid(grid))
}

fn backend(cfg: &RunConfig) -> Result<SimilarityBackend> {
    let b = match cfg.raw("metrics.backend") {
        "pixel" => SimilarityBackend::pixel_cosine(),
        "patch" => SimilarityBackend::patch_descriptor(
            cfg.get("metrics.patch")?,
            cfg.get("metrics.stride")?,
        ),
        "external" => {
            let table: PathBuf = cfg.get("metrics.embeddings")?;
            let ids: PathBuf = cfg.get("metrics.embedding_ids")?;
            SimilarityBackend::external(EmbeddingTable::load(table, ids)?)
        }
        other => {
            return Err(CliError::Config(format!(
                "metrics.backend = {other:?}: expected pixel, patch or external"
            )))
        }
    };
    let b = match cfg.get_opt::<f64>("metrics.tau")? {
        Some(tau) => b.with_tau(tau),
        None => b,
    };
    b.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(b)
}

fn read_images(path: &Path) -> Result<Vec<Image>> {
    Ok(read_tensor(path)?.to_images()?)
}

fn check_shape(images: &[Image], den: &OptimalDenoiser, what: &str) -> Result<()> {
    if let Some(bad) = images.iter().find(|i| i.shape() != den.shape()) {
        return Err(CliError::Input(format!(
            "{what} have shape {}, dataset images {}",
            bad.shape(),
            den.shape()
        )));
    }
    Ok(())
}

/// Generates `sampler.n` images from seeded noises (or the start states in
/// `sampler.noise_path`) and writes them as a sample set.
pub fn cmd_sample(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let sched = schedule(&cfg)?;
    let den = OptimalDenoiser::new(dataset(&cfg)?, sched)?;
    let scfg = sampler_config(&cfg, &sched)?;
    let seed: u64 = cfg.get("seed")?;
    let starts: Vec<Image> = match cfg.get_opt::<PathBuf>("sampler.noise_path")? {
        Some(p) => read_images(&p)?,
        None => {
            let n: u64 = cfg.get("sampler.n")?;
            (0..n)
                .map(|id| sched.scale_initial_noise(&noise_for_id(seed, id, den.shape())))
                .collect()
        }
    };
    if starts.is_empty() {
        return Err(CliError::Input("no start states".into()));
    }
    check_shape(&starts, &den, "start states")?;
    let out = out_dir(common, &cfg)?;
    let images = generate_batch(&den, &starts, &scfg)?;
    let model_id = match cfg.get_opt::<String>("sampler.model_id")? {
        Some(id) => id,
        None => format!("{}-{}", scfg.method, scfg.steps),
    };
    if cfg.get::<bool>("sampler.png_grid")? {
        let cols = (images.len() as f64).sqrt().ceil() as usize;
        tile(&images, cols)?.save(out.join("grid.png"))?;
    }
    let ids = (0..images.len() as u64).collect();
    SampleSet::new(model_id, images, ids, None)?.save(&out)?;
    Ok(())
}

fn collect_inputs(paths: &[PathBuf]) -> Result<Vec<Image>> {
    let mut images = Vec::new();
    for p in paths {
        if p.is_dir() {
            images.extend(load_dataset(p, None, None)?.images().iter().cloned());
        } else if p.extension().is_some_and(|e| e == "drtf") {
            images.extend(read_images(p)?);
        } else {
            images.push(Image::load(p)?);
        }
    }
    Ok(images)
}

/// Maps images to their noise codes; writes `codes.drtf`.
pub fn cmd_encode(common: &Common, inputs: &[PathBuf]) -> Result<()> {
    let cfg = common.resolve()?;
    let sched = schedule(&cfg)?;
    let den = OptimalDenoiser::new(dataset(&cfg)?, sched)?;
    let images = collect_inputs(inputs)?;
    if images.is_empty() {
        return Err(CliError::Input("no images to encode".into()));
    }
    check_shape(&images, &den, "inputs")?;
    let gen = sampler_config(&cfg, &sched)?;
    let enc = SamplerConfig {
        t_start: gen.t_end,
        t_end: gen.t_start,
        denoise_final: false,
        ..gen
    };
    let out = out_dir(common, &cfg)?;
    let codes = encode_batch(&den, &images, &enc)?;
    write_tensor(out.join("codes.drtf"), &Tensor::from_images(&codes)?)?;
    Ok(())
}

/// Score matrix over sample-set directories, plus GL scores when a dataset
/// is configured.
pub fn cmd_scores(common: &Common, set_dirs: &[PathBuf]) -> Result<()> {
    let cfg = common.resolve()?;
    if set_dirs.is_empty() {
        return Err(CliError::Input("no sample sets given".into()));
    }
    let sets = set_dirs
        .iter()
        .map(SampleSet::load)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let backend = backend(&cfg)?;
    let metric = match cfg.raw("metrics.metric") {
        "rp" => Metric::Rp,
        "mae" => Metric::Mae {
            threshold: cfg.get("metrics.mae_threshold")?,
        },
        other => {
            return Err(CliError::Config(format!(
                "metrics.metric = {other:?}: expected rp or mae"
            )))
        }
    };
    let matrix = score_matrix(&sets, &backend, metric)?;
    let gl = if cfg.is_set("dataset.path") || cfg.is_set("dataset.synthetic") {
        let train = dataset(&cfg)?;
        let mut csv = String::from("model_id,gl_score\n");
        for s in &sets {
            csv += &format!("{},{:.6}\n", s.model_id, gl_score(s, &train, &backend)?);
        }
        Some(csv)
    } else {
        None
    };
    let out = out_dir(common, &cfg)?;
    write_text(&out.join("scores.csv"), &matrix.to_csv())?;
    if let Some(gl) = gl {
        write_text(&out.join("gl.csv"), &gl)?;
    }
    Ok(())
}

pub fn cmd_hyperplane(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let sched = schedule(&cfg)?;
    let den = OptimalDenoiser::new(dataset(&cfg)?, sched)?;
    let scfg = sampler_config(&cfg, &sched)?;
    let seed: u64 = cfg.get("seed")?;
    let ids: Vec<u64> = cfg.get_list("experiment.anchors")?;
    let [a, b, c] = ids.as_slice() else {
        return Err(CliError::Config(format!(
            "experiment.anchors needs 3 noise ids, got {}",
            ids.len()
        )));
    };
    let anchors = [*a, *b, *c].map(|id| noise_for_id(seed, id, den.shape()));
    let grid = HyperplaneGrid {
        size: cfg.get("experiment.grid")?,
        alpha: (
            cfg.get("experiment.alpha_lo")?,
            cfg.get("experiment.alpha_hi")?,
        ),
        beta: (
            cfg.get("experiment.beta_lo")?,
            cfg.get("experiment.beta_hi")?,
        ),
    };
    let out = out_dir(common, &cfg)?;
    let map = hyperplane_map(
        &den,
        &scfg,
        [&anchors[0], &anchors[1], &anchors[2]],
        grid,
        &backend(&cfg)?,
    )?;
    write_text(&out.join("hyperplane.csv"), &map.to_csv())?;
    write_text(&out.join("anchors.csv"), &map.anchors_csv())?;
    write_text(
        &out.join("coherence.txt"),
        &format!("{:.6}\n", map.coherence()),
    )?;
    map.to_pgm_image().save(out.join("hyperplane.pgm"))?;
    for (k, img) in map.anchor_images.iter().enumerate() {
        img.save(out.join(format!("anchor_{}.png", k + 1)))?;
    }
    Ok(())
}

pub fn cmd_sweep(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let sched = schedule(&cfg)?;
    let base = dataset(&cfg)?;
    let samplers =
        cfg.get_list::<String>("experiment.samplers")?
            .iter()
            .map(|spec| {
                let (m, steps) = spec.split_once(':').ok_or_else(|| {
                    CliError::Config(format!("experiment.samplers: {spec:?} is not method:steps"))
                })?;
                let method: Method = m
                    .parse()
                    .map_err(|e| CliError::Config(format!("experiment.samplers: {e}")))?;
                let steps: usize = steps
                    .parse()
                    .map_err(|e| CliError::Config(format!("experiment.samplers: {spec:?}: {e}")))?;
                Ok(SamplerConfig::generation(method, steps, &sched)
                    .with_grid(cfg.get("sampler.grid")?))
            })
            .collect::<Result<Vec<_>>>()?;
    let out = out_dir(common, &cfg)?;
    let result = memorization_sweep(
        &base,
        &cfg.get_list::<usize>("experiment.sizes")?,
        &samplers,
        cfg.get("experiment.n_samples")?,
        &backend(&cfg)?,
        sched,
        cfg.get("seed")?,
    )?;
    write_text(&out.join("sweep.csv"), &result.to_csv())
}

fn mask(cfg: &RunConfig, shape: Shape) -> Result<InpaintMask> {
    let spec = cfg.raw("inverse.mask");
    let m = match spec {
        "easy" | "hard" => InpaintMask::preset(spec, shape.height, shape.width)?,
        path => InpaintMask::load(path)?,
    };
    if (m.height(), m.width()) != (shape.height, shape.width) {
        return Err(CliError::Input(format!(
            "mask is {}x{}, images are {}x{}",
            m.height(),
            m.width(),
            shape.height,
            shape.width
        )));
    }
    Ok(m)
}

pub fn cmd_inpaint(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let sched = schedule(&cfg)?;
    let den = OptimalDenoiser::new(dataset(&cfg)?, sched)?;
    let seed: u64 = cfg.get("seed")?;
    let target: usize = cfg.get("inverse.target")?;
    if target >= den.dataset().len() {
        return Err(CliError::Config(format!(
            "inverse.target = {target} but the dataset has {} images",
            den.dataset().len()
        )));
    }
    let u = den.dataset().image(target).clone();
    let m = mask(&cfg, den.shape())?;
    let eta: f64 = cfg.get("inverse.noise_level")?;
    let obs = if eta > 0.0 {
        apply_mask_noisy(&u, &m, eta, &mut SeededRng::new(seed, u64::MAX))?
    } else {
        apply_mask(&u, &m)?
    };
    let n_dps: usize = cfg.get("inverse.n_dps")?;
    let xi: Vec<f64> = cfg.get_list("inverse.xi")?;
    let xi = match xi.as_slice() {
        [v] => vec![*v; n_dps],
        _ => xi,
    };
    let dps = DpsConfig {
        n_dps,
        xi,
        method: cfg.get("inverse.method")?,
        grid: cfg.get("inverse.grid")?,
        nfe_budget: cfg.get("inverse.nfe_budget")?,
    };
    dps.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let eps = sched.scale_initial_noise(&noise_for_id(
        seed,
        cfg.get("inverse.noise_id")?,
        den.shape(),
    ));
    let out = out_dir(common, &cfg)?;
    let recon = dps_inpaint(&den, &obs, &eps, &dps)?;
    m.to_image().save(out.join("mask.pgm"))?;
    obs.z.save(out.join("observation.png"))?;
    u.save(out.join("target.png"))?;
    recon.save(out.join("reconstruction.png"))?;
    write_tensor(
        out.join("reconstruction.drtf"),
        &Tensor::from_images(std::slice::from_ref(&recon))?,
    )?;
    write_text(
        &out.join("metrics.txt"),
        &format!("observed_mae = {:.6}\n", observed_mae(&recon, &u, &m)?),
    )
}
