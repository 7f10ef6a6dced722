use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hqnoise::collector::{collect_pair, generate, NoisePair};
use hqnoise::edn::{apply_edn, load_checkpoint, samples_from_pairs, train_samples, write_checkpoint, EdnModel};
use hqnoise::format::{write_latents, NoisePairFile};
use hqnoise::guidance::CfgSchedule;
use hqnoise::quality::{filter_pair, filtering_rate, parse_score_file, perceptual_score, psnr, ssim};
use hqnoise::scheduler::initial_noise;
use hqnoise::theory::run_verification;
use hqnoise::{Error, Result, Tensor, ToyWorld64};
use rayon::prelude::*;

use crate::config::RunConfig;

/// Settings shared by every command after flag overrides.
pub struct Context {
    pub config: RunConfig,
    pub workers: usize,
    pub out: PathBuf,
    pub preset: Option<String>,
}

impl Context {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", self.workers)))
    }

    /// Creates the output directory and opens `name` inside it, so that an
    /// unwritable destination fails before any work starts.
    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        fs::create_dir_all(&self.out)?;
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn path(&self, explicit: Option<PathBuf>, default: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.out.join(default))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Argument(format!("{what} {} does not exist", path.display())))
    }
}

/// Shortest decimal that keeps twelve significant digits.
pub fn decimal(x: f64) -> String {
    let s = format!("{:.12}", x);
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

/// Mean proxy distance of a generated sample against the object's views.
fn score_sample(
    z: &Tensor<f64>,
    seed: u64,
    gamma: &CfgSchedule,
    cfg: &RunConfig,
    world: &ToyWorld64,
) -> Result<f64> {
    let schedule = cfg.schedule()?;
    let k = world.object_for_seed(seed);
    let out = generate(z, world.reference(k), gamma, cfg.prediction()?, &schedule, world)?;
    let pred: Vec<_> = out.outer_iter().collect();
    let gt: Vec<_> = world.ground_truth(k).outer_iter().collect();
    perceptual_score(&pred, &gt, cfg.metric())
}

pub fn collect(ctx: &Context, count: Option<u64>) -> Result<()> {
    let cfg = &ctx.config;
    let count = count.unwrap_or(cfg.collection.count);
    let mut data = ctx.create("pairs.ednp")?;
    let mut log = ctx.create("collect.log")?;
    let world = cfg.world()?;
    let schedule = cfg.schedule()?;
    let collection = cfg.collection()?;

    let mut text = String::new();
    if let Some(p) = &ctx.preset {
        writeln!(text, "{p}").ok();
    }
    let s = &cfg.schedule;
    writeln!(
        text,
        "schedule: karras steps={} sigma_min={} sigma_max={} rho={} q={:.4}",
        s.steps,
        s.sigma_min,
        s.sigma_max,
        s.rho,
        schedule.q()
    )
    .ok();
    writeln!(
        text,
        "collection: n={} gamma1 {} gamma2 {} {} align={}",
        collection.n,
        collection.gamma1.describe(),
        collection.gamma2,
        collection.kind.name(),
        collection.align
    )
    .ok();
    writeln!(
        text,
        "world: {} views of {:?}, {} objects",
        world.num_views(),
        world.frame_shape(),
        world.num_objects()
    )
    .ok();
    let end = cfg.seed.checked_add(count).ok_or_else(|| Error::Config("seed range overflows u64".into()))?;
    writeln!(text, "seeds: {}..{} ({count})", cfg.seed, end).ok();

    let seeds: Vec<u64> = (cfg.seed..end).collect();
    let results: Vec<Result<NoisePair<f64>>> =
        ctx.pool()?.install(|| seeds.par_iter().map(|&seed| collect_pair(seed, &world, &collection, &schedule)).collect());
    let mut pairs = Vec::with_capacity(results.len());
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(p) => pairs.push(p),
            Err(e) => writeln!(text, "failed seed {seed}: {e}").unwrap_or(()),
        }
    }
    writeln!(text, "collected {}/{} records", pairs.len(), count).ok();
    eprint!("{text}");
    log.write_all(text.as_bytes())?;
    log.flush()?;

    if pairs.is_empty() {
        return Err(Error::Degenerate("every seed failed; nothing to write".into()));
    }
    NoisePairFile::from_pairs(pairs)?.write(&mut data)?;
    data.flush()?;
    Ok(())
}

pub fn filter(ctx: &Context, input: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    let input = ctx.path(input, "pairs.ednp");
    require_file(&input, "input dataset")?;
    if let Some(scores) = &cfg.filter.scores {
        require_file(scores, "score file")?;
    }
    let mut data = ctx.create("filtered.ednp")?;
    let mut table = ctx.create("filter_scores.csv")?;
    let mut log = ctx.create("filter.log")?;
    let file: NoisePairFile<f64> = NoisePairFile::load(&input)?;
    let header = file.header.clone();

    let mut text = String::new();
    let scored: Vec<(NoisePair<f64>, (f64, f64))> = match &cfg.filter.scores {
        Some(path) => {
            let table = parse_score_file(&fs::read_to_string(path)?)?;
            let mut out = Vec::new();
            for p in file.pairs {
                match table.get(&p.seed) {
                    Some(&s) => out.push((p, s)),
                    None => {
                        let msg = format!("warning: no score for seed {}, record skipped", p.seed);
                        eprintln!("{msg}");
                        writeln!(text, "{msg}").ok();
                    }
                }
            }
            out
        }
        None => {
            let world = cfg.world()?;
            let scores: Vec<Result<(f64, f64)>> = ctx.pool()?.install(|| {
                file.pairs
                    .par_iter()
                    .map(|p| {
                        let s_rd = score_sample(&p.z_t, p.seed, &p.gamma1, cfg, &world)?;
                        let s_hq = score_sample(&p.z_tilde_t, p.seed, &p.gamma1, cfg, &world)?;
                        Ok((s_rd, s_hq))
                    })
                    .collect()
            });
            let scores: Result<Vec<_>> = scores.into_iter().collect();
            file.pairs.into_iter().zip(scores?).collect()
        }
    };

    let m = cfg.filter.threshold;
    writeln!(table, "seed,s_rd,s_hq,retained")?;
    let total = scored.len();
    let mut kept = Vec::new();
    for (mut p, (s_rd, s_hq)) in scored {
        let keep = filter_pair(s_rd, s_hq, m);
        writeln!(table, "{},{},{},{}", p.seed, s_rd, s_hq, keep as u8)?;
        if keep {
            p.s_rd = Some(s_rd);
            p.s_hq = Some(s_hq);
            kept.push(p);
        }
    }
    let rate = filtering_rate(kept.len(), total)?;
    writeln!(text, "threshold m={m}: {rate}").ok();
    eprint!("{text}");
    log.write_all(text.as_bytes())?;
    log.flush()?;
    table.flush()?;
    NoisePairFile::new(header, kept)?.write(&mut data)?;
    data.flush()?;
    Ok(())
}

pub fn train(ctx: &Context, input: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.config;
    let input = ctx.path(input, "filtered.ednp");
    require_file(&input, "training dataset")?;
    let mut checkpoint = ctx.create("edn.ednm")?;
    let mut csv = ctx.create("loss.csv")?;
    let file: NoisePairFile<f64> = NoisePairFile::load(&input)?;
    if file.pairs.is_empty() {
        return Err(Error::Argument(format!("{} holds no records", input.display())));
    }
    let samples = samples_from_pairs(&file.pairs)?;
    let (sum_sq, len) = samples
        .iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x.target.dot(&x.target).unwrap_or(0.0), n + x.target.len()));
    let rms = (sum_sq / len as f64).sqrt();
    let residual_scale = if rms > 0.0 { rms } else { 1.0 };
    let edn = cfg.edn_config(cfg.schedule()?.q(), residual_scale)?;
    let mut model = EdnModel::<f64>::new(edn, cfg.seed)?;
    if cfg.train.zero_head {
        model.zero_head();
    }
    eprintln!(
        "training on {} samples from {} records: channels {:?}, residual scale {:.4}",
        samples.len(),
        file.pairs.len(),
        edn.channels,
        residual_scale
    );
    let result = train_samples(&samples, &mut model, &cfg.train_config()?);
    write_checkpoint(&mut model, &mut checkpoint)?;
    checkpoint.flush()?;
    let history = result?;
    writeln!(csv, "epoch,lr,mean_loss")?;
    for e in &history {
        writeln!(csv, "{},{},{}", e.epoch, decimal(e.lr), e.mean_loss)?;
    }
    csv.flush()?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        eprintln!("loss {:.6} -> {:.6} over {} epochs", first.mean_loss, last.mean_loss, history.len());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Standard,
    Inversion,
    WithEdn,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "inversion" => Ok(Self::Inversion),
            "with-edn" | "with_edn" => Ok(Self::WithEdn),
            other => Err(Error::Argument(format!("unknown inference mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Inversion => "inversion",
            Self::WithEdn => "with-edn",
        }
    }
}

struct ViewMetrics {
    psnr: f64,
    ssim: f64,
    proxy: f64,
}

pub fn infer(ctx: &Context, mode: Mode, checkpoint: Option<PathBuf>, count: Option<u64>) -> Result<()> {
    let cfg = &ctx.config;
    let world = cfg.world()?;
    let model = match (mode, checkpoint) {
        (Mode::WithEdn, path) => {
            let path = ctx.path(path, "edn.ednm");
            require_file(&path, "checkpoint")?;
            let model: EdnModel<f64> = load_checkpoint(&path)?;
            let c = model.config();
            if [4, c.height, c.width] != world.frame_shape() {
                return Err(Error::Argument(format!(
                    "checkpoint expects {}x{} latents, world has {:?}",
                    c.height,
                    c.width,
                    world.frame_shape()
                )));
            }
            Some(model)
        }
        (_, Some(path)) => {
            return Err(Error::Argument(format!(
                "a checkpoint ({}) only applies to with-edn mode, not {}",
                path.display(),
                mode.name()
            )))
        }
        (_, None) => None,
    };
    let count = count.unwrap_or(cfg.infer.count);
    let mut latents_out = ctx.create(&format!("latents_{}.ednl", mode.name()))?;
    let mut csv = ctx.create(&format!("metrics_{}.csv", mode.name()))?;
    let schedule = cfg.schedule()?;
    let collection = cfg.collection()?;
    let kind = collection.kind;
    let range = cfg.filter.dynamic_range;
    let end = cfg.seed.checked_add(count).ok_or_else(|| Error::Config("seed range overflows u64".into()))?;
    let seeds: Vec<u64> = (cfg.seed..end).collect();

    let run = |seed: u64| -> Result<(Tensor<f64>, Vec<ViewMetrics>)> {
        let k = world.object_for_seed(seed);
        let reference = world.reference(k);
        let z = match mode {
            Mode::Standard => initial_noise(&world.sample_shape(), seed, schedule.q()),
            Mode::Inversion => collect_pair(seed, &world, &collection, &schedule)?.z_tilde_t,
            Mode::WithEdn => {
                let z = initial_noise(&world.sample_shape(), seed, schedule.q());
                apply_edn(model.as_ref().expect("model loaded for with-edn"), &z, reference)?
            }
        };
        let out = generate(&z, reference, &collection.gamma1, kind, &schedule, &world)?;
        let metrics = out
            .outer_iter()
            .zip(world.ground_truth(k).outer_iter())
            .map(|(p, g)| {
                let s = ssim(&p, &g, range)?;
                Ok(ViewMetrics {
                    psnr: psnr(&p, &g, range)?,
                    ssim: s,
                    proxy: (1.0 - s) / 2.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, metrics))
    };
    let results: Vec<Result<(Tensor<f64>, Vec<ViewMetrics>)>> =
        ctx.pool()?.install(|| seeds.par_iter().map(|&s| run(s)).collect());

    writeln!(csv, "seed,view,psnr,ssim,proxy")?;
    let mut latents = Vec::with_capacity(seeds.len());
    let mut total = 0.0;
    for (&seed, r) in seeds.iter().zip(results) {
        let (out, metrics) = r?;
        for (v, m) in metrics.iter().enumerate() {
            writeln!(csv, "{seed},{v},{},{},{}", m.psnr, m.ssim, m.proxy)?;
            total += m.proxy / metrics.len() as f64;
        }
        latents.push((seed, out));
    }
    csv.flush()?;
    write_latents(&mut latents_out, &latents)?;
    latents_out.flush()?;
    eprintln!(
        "{}: {} seeds from {}, mean proxy {:.6}",
        mode.name(),
        seeds.len(),
        cfg.seed,
        total / seeds.len().max(1) as f64
    );
    Ok(())
}

pub fn verify(ctx: &Context) -> Result<()> {
    let mut txt = ctx.create("verify.txt")?;
    let mut csv = ctx.create("verify.csv")?;
    let summary = run_verification(&ctx.config.verify_config()?)?;
    let report = summary.to_string();
    print!("{report}");
    txt.write_all(report.as_bytes())?;
    csv.write_all(summary.to_csv().as_bytes())?;
    txt.flush()?;
    csv.flush()?;
    if summary.passed() {
        Ok(())
    } else {
        let failed: Vec<String> = summary
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} ({})", c.name, c.kind.name()))
            .collect();
        Err(Error::Verification(failed.join(", ")))
    }
}
