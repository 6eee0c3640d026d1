use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use hoshash::chaos::{lyapunov_exponents, ChaosParams};
use hoshash::encoding::piracy_hash_timed;
use hoshash::modsim::{self, ArchSpec, TamperPlan};
use hoshash::tamper_hash::{direct_tamper_hash, TamperScheme};
use hoshash::{
    load_container, locate_tampering, piracy_hash, save_container, tamper_localization_hash,
    weighted_distance, HashConfig, ModelWeights, PiracyHash, Registry, RegistryRecord,
    TamperHash, Verdict,
};

const EXIT_NO_MATCH: u8 = 3;

#[derive(Parser)]
#[command(name = "hoshash", version, about = "Training-free CNN weight hashing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the piracy hash of a weight container.
    Hash {
        model: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Report selection and feature timings on stderr.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Compute the tamper-localization hash of a weight container.
    TamperHash {
        model: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Hash a model and append it to a registry.
    Register {
        model: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// Defaults to the container's model id, then the file stem.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value = "")]
        notes: String,
        /// Also store the tamper hash.
        #[arg(long)]
        with_tamper: bool,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Rank registry entries by distance to a model or hash file.
    /// Exits 0 when the best match is SIMILAR, 3 otherwise.
    Query {
        input: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Compare two models or hash files. Exits 0 if SIMILAR, 3 if DISTINCT.
    Verify {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Print the weighted distance between two models or hash files.
    Distance {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Compare tamper hashes (or models) and list changed blocks.
    /// Exits 0 when nothing is flagged, 3 otherwise.
    Locate {
        reference: PathBuf,
        test: PathBuf,
        /// Ground-truth tampered blocks, comma separated.
        #[arg(long, value_delimiter = ',')]
        truth: Option<Vec<usize>>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Run the experiments listed in a JSON manifest.
    Simulate {
        manifest: PathBuf,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Lyapunov exponents of the chaotic map.
    Lyapunov {
        #[arg(long, default_value_t = 0.2)]
        mu: f64,
        #[arg(long = "k-map", default_value_t = 2.0)]
        k_map: f64,
        #[arg(long, default_value_t = 0.3)]
        x0: f64,
        /// Defaults to x0 / 2.
        #[arg(long)]
        q0: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        warmup: usize,
        #[arg(long, default_value_t = 100_000)]
        horizon: usize,
    },
    /// Write synthetic models: one per spec file, or the default suite.
    Generate {
        /// An architecture spec (JSON). Omit to write the default suite.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(short, long)]
        out_dir: PathBuf,
    },
    /// Add Gaussian noise to randomly chosen parameter blocks.
    Tamper {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        opts: HashOpts,
    },
    /// Magnitude-prune every weight matrix and kernel.
    Prune {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        rate: f64,
    },
    /// Multiply every weight by (1 + epsilon * N(0, 1)).
    Finetune {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    Default,
    /// 100 tamper blocks, for MNIST-scale models.
    Small,
}

#[derive(Args, Clone)]
struct HashOpts {
    /// Secret key. Falls back to $HOSHASH_KEY, then --key-file.
    #[arg(long, env = "HOSHASH_KEY", hide_env_values = true)]
    key: Option<String>,
    #[arg(long)]
    key_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Default)]
    profile: Profile,
    /// Fraction of largest-magnitude weights kept.
    #[arg(long)]
    retain: Option<f64>,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    k2: Option<f64>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long = "k-map")]
    k_map: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl HashOpts {
    fn key(&self) -> Result<String> {
        if let Some(k) = &self.key {
            return Ok(k.clone());
        }
        if let Some(path) = &self.key_file {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading key file {}", path.display()))?;
            return Ok(text.trim_end_matches(['\r', '\n']).to_string());
        }
        bail!("no key given: use --key, HOSHASH_KEY or --key-file")
    }

    fn config(&self) -> Result<HashConfig> {
        let key = self.key()?;
        let mut cfg = match self.profile {
            Profile::Default => HashConfig::with_key(key),
            Profile::Small => HashConfig::small_profile(key),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(retain, segments, bits, capacity, tau, k1, k2, blocks, mu, k_map, iterations);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::Similar => 0,
        Verdict::Distinct => EXIT_NO_MATCH,
    }
}

fn load_model(path: &Path) -> Result<ModelWeights> {
    load_container(path).with_context(|| format!("loading {}", path.display()))
}

/// True when the file looks like a JSON record rather than a container.
fn is_record(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{'))
}

fn piracy_input(path: &Path, cfg: &HashConfig) -> Result<PiracyHash> {
    if is_record(path)? {
        return PiracyHash::load(path).with_context(|| format!("reading hash {}", path.display()));
    }
    let model = load_model(path)?;
    let mut h = piracy_hash(&model, cfg)?;
    if h.model_id.is_none() {
        h.model_id = Some(file_stem(path));
    }
    Ok(h)
}

fn tamper_input(path: &Path, cfg: &HashConfig) -> Result<TamperHash> {
    if is_record(path)? {
        return TamperHash::load(path).with_context(|| format!("reading hash {}", path.display()));
    }
    Ok(tamper_localization_hash(&load_model(path)?, cfg)?)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(p) => fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Hash {
            model,
            output,
            timing,
            opts,
        } => {
            let cfg = opts.config()?;
            let (h, t) = piracy_hash_timed(&load_model(&model)?, &cfg)?;
            if timing {
                eprintln!(
                    "selection: {:.3} s, features: {:.3} s",
                    t.selection.as_secs_f64(),
                    t.features.as_secs_f64()
                );
            }
            emit(&h.to_json(), output.as_deref())?;
        }
        Command::TamperHash { model, output, opts } => {
            let h = tamper_localization_hash(&load_model(&model)?, &opts.config()?)?;
            emit(&h.to_json(), output.as_deref())?;
        }
        Command::Register {
            model,
            registry,
            id,
            notes,
            with_tamper,
            opts,
        } => {
            let cfg = opts.config()?;
            let m = load_model(&model)?;
            let id = id
                .or_else(|| m.model_id().map(str::to_string))
                .unwrap_or_else(|| file_stem(&model));
            let ph = piracy_hash(&m, &cfg)?;
            let th = with_tamper
                .then(|| tamper_localization_hash(&m, &cfg))
                .transpose()?;
            Registry::new(&registry).register(&RegistryRecord::new(&id, &ph, th.as_ref(), notes))?;
            println!("registered {id}");
        }
        Command::Query {
            input,
            registry,
            top,
            opts,
        } => {
            let cfg = opts.config()?;
            let h = piracy_input(&input, &cfg)?;
            let out = Registry::new(&registry).query(&h, &cfg.weights()?)?;
            for e in &out.skipped {
                eprintln!("warning: {e}");
            }
            for m in out.matches.iter().take(top) {
                println!(
                    "{}\t{:.4}\t{}\td_hos={:.4}\td_struct={:.4}",
                    m.model_id.as_deref().unwrap_or("?"),
                    m.distance,
                    m.verdict,
                    m.d_hos,
                    m.d_struct
                );
            }
            return Ok(out.best().map_or(EXIT_NO_MATCH, |m| verdict_code(m.verdict)));
        }
        Command::Verify { a, b, opts } | Command::Distance { a, b, opts } => {
            let cfg = opts.config()?;
            let ha = piracy_input(&a, &cfg)?;
            let hb = piracy_input(&b, &cfg)?;
            let m = weighted_distance(&ha, &hb, &cfg.weights()?)?;
            println!(
                "{:.4}\t{}\td_hos={:.4}\td_struct={:.4}",
                m.distance, m.verdict, m.d_hos, m.d_struct
            );
            return Ok(verdict_code(m.verdict));
        }
        Command::Locate {
            reference,
            test,
            truth,
            json,
            opts,
        } => {
            let cfg = opts.config()?;
            let a = tamper_input(&reference, &cfg)?;
            let b = tamper_input(&test, &cfg)?;
            let truth: Option<BTreeSet<usize>> = truth.map(|t| t.into_iter().collect());
            let report = locate_tampering(&a, &b, truth.as_ref())?;
            if json {
                println!("{}", serde_json::to_string(&report)?);
            } else {
                println!("{report}");
            }
            return Ok(if report.flagged.is_empty() { 0 } else { EXIT_NO_MATCH });
        }
        Command::Simulate { manifest, opts } => simulate(&manifest, &opts)?,
        Command::Lyapunov {
            mu,
            k_map,
            x0,
            q0,
            warmup,
            horizon,
        } => {
            let params = ChaosParams::new(mu, k_map, 1)?;
            let (l1, l2) = lyapunov_exponents(&params, x0, q0.unwrap_or(x0 / 2.0), warmup, horizon)?;
            println!("lambda1 = {l1:.6}\nlambda2 = {l2:.6}");
        }
        Command::Generate { spec, out_dir } => {
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let specs = match spec {
                Some(p) => vec![read_json::<ArchSpec>(&p)?],
                None => modsim::default_suite(),
            };
            for s in &specs {
                let path = out_dir.join(format!("{}.safetensors", s.name));
                save_container(&modsim::generate_model(s)?, &path)?;
                println!("{}\t{}", path.display(), s.total_params());
            }
        }
        Command::Tamper {
            model,
            output,
            alpha,
            sigma,
            seed,
            opts,
        } => {
            let blocks = opts.blocks.unwrap_or(match opts.profile {
                Profile::Default => HashConfig::default().blocks,
                Profile::Small => hoshash::config::SMALL_PROFILE_BLOCKS,
            });
            let plan = TamperPlan::new(alpha, sigma, seed)?;
            let (m, chosen) = modsim::tamper(&load_model(&model)?, &plan, blocks)?;
            save_container(&m, &output)?;
            let list: Vec<String> = chosen.iter().map(usize::to_string).collect();
            println!("{}", list.join(","));
        }
        Command::Prune {
            model,
            output,
            rate,
        } => save_container(&modsim::prune(&load_model(&model)?, rate)?, &output)?,
        Command::Finetune {
            model,
            output,
            epsilon,
            seed,
        } => save_container(
            &modsim::finetune_surrogate(&load_model(&model)?, epsilon, seed)?,
            &output,
        )?,
    }
    Ok(0)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    /// Architecture specs; the default suite when absent.
    #[serde(default)]
    models: Option<Vec<ArchSpec>>,
    experiments: Vec<Experiment>,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Experiment {
    Discrimination,
    Prune {
        rates: Vec<f64>,
    },
    Finetune {
        epsilon: f64,
        seeds: Vec<u64>,
    },
    Tamper {
        alphas: Vec<f64>,
        #[serde(default = "default_sigma")]
        sigma: f64,
        seeds: Vec<u64>,
        #[serde(default)]
        scheme: TamperScheme,
    },
}

fn default_sigma() -> f64 {
    0.1
}

/// Runs each experiment over every model, printing one JSON line per
/// measurement.
fn simulate(path: &Path, opts: &HashOpts) -> Result<()> {
    let manifest: Manifest = read_json(path)?;
    let base = opts.config()?;
    let weights = base.weights()?;
    let specs = manifest.models.unwrap_or_else(modsim::default_suite);
    let models = specs
        .iter()
        .map(|s| Ok(modsim::generate_model(s)?))
        .collect::<Result<Vec<_>>>()?;
    let hashes = models
        .iter()
        .map(|m| Ok(piracy_hash(m, &base)?))
        .collect::<Result<Vec<_>>>()?;

    for exp in &manifest.experiments {
        match exp {
            Experiment::Discrimination => {
                for i in 0..models.len() {
                    for j in i + 1..models.len() {
                        let m = weighted_distance(&hashes[i], &hashes[j], &weights)?;
                        println!(
                            "{}",
                            json!({"experiment": "discrimination", "a": specs[i].name, "b": specs[j].name,
                                   "distance": m.distance, "d_hos": m.d_hos, "d_struct": m.d_struct,
                                   "verdict": m.verdict})
                        );
                    }
                }
            }
            Experiment::Prune { rates } => {
                for (i, m) in models.iter().enumerate() {
                    for &rate in rates {
                        let h = piracy_hash(&modsim::prune(m, rate)?, &base)?;
                        let r = weighted_distance(&hashes[i], &h, &weights)?;
                        println!(
                            "{}",
                            json!({"experiment": "prune", "model": specs[i].name, "rate": rate,
                                   "distance": r.distance, "verdict": r.verdict})
                        );
                    }
                }
            }
            Experiment::Finetune { epsilon, seeds } => {
                for (i, m) in models.iter().enumerate() {
                    for &seed in seeds {
                        let h = piracy_hash(&modsim::finetune_surrogate(m, *epsilon, seed)?, &base)?;
                        let r = weighted_distance(&hashes[i], &h, &weights)?;
                        println!(
                            "{}",
                            json!({"experiment": "finetune", "model": specs[i].name, "epsilon": epsilon,
                                   "seed": seed, "distance": r.distance, "verdict": r.verdict})
                        );
                    }
                }
            }
            Experiment::Tamper {
                alphas,
                sigma,
                seeds,
                scheme,
            } => {
                for (i, m) in models.iter().enumerate() {
                    let cfg = HashConfig {
                        blocks: if modsim::is_small(&specs[i]) && opts.blocks.is_none() {
                            hoshash::config::SMALL_PROFILE_BLOCKS
                        } else {
                            base.blocks
                        },
                        ..base.clone()
                    };
                    let hash = |m: &ModelWeights| match scheme {
                        TamperScheme::Chaotic => tamper_localization_hash(m, &cfg),
                        TamperScheme::Direct => direct_tamper_hash(m, &cfg),
                    };
                    let reference = hash(m)?;
                    for &alpha in alphas {
                        for &seed in seeds {
                            let plan = TamperPlan::new(alpha, *sigma, seed)?;
                            let (t, truth) = modsim::tamper(m, &plan, cfg.blocks)?;
                            let report = locate_tampering(&reference, &hash(&t)?, Some(&truth))?;
                            println!(
                                "{}",
                                json!({"experiment": "tamper", "model": specs[i].name, "blocks": cfg.blocks,
                                       "alpha": alpha, "sigma": sigma, "seed": seed, "scheme": scheme,
                                       "eta": report.eta, "eta_prime": report.eta_prime,
                                       "r_t": report.r_t, "false_flags": report.false_flags})
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
