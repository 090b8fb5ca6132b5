use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrlr::align::{atom_probes, region_of_attraction, AlignConfig, PerturbAxis, DEFAULT_S};
use mrlr::harness::bench::{roa_csv, run_scale, scale_csv, ScaleConfig, ScaleMode, MIN_REPS};
use mrlr::harness::dataset::{build_dictionary, load_dictionary};
use mrlr::harness::pgm::{load_pgm, write_pgm};
use mrlr::harness::synth::{generate, SynthSpec};
use mrlr::harness::trace::Trace;
use mrlr::parallel::default_threads;
use mrlr::recognize::{recognize_pipeline, Coder, DEFAULT_LAMBDA};
use mrlr::{Dictionary, Frame, MrlrError, Rect, SimilarityParams};

#[derive(Parser)]
#[command(name = "mrlr", version, about = "Face alignment with locality-constrained dictionaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dictionary file from a dataset directory.
    BuildDict {
        dataset: PathBuf,
        #[arg(long, value_parser = parse_frame)]
        frame: Frame,
        /// Append the images in `outside/` as outside-data atoms.
        #[arg(long)]
        outside: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Align one image and write the aligned crop and an iteration trace.
    Align {
        dict: PathBuf,
        image: PathBuf,
        #[command(flatten)]
        opts: AlignOpts,
        #[arg(short, long)]
        output: PathBuf,
        /// Trace file (default: OUTPUT with `.trace.txt` appended).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Align, code and classify one image.
    Recognize {
        dict: PathBuf,
        image: PathBuf,
        #[command(flatten)]
        opts: AlignOpts,
        #[arg(long, default_value = "crc")]
        coder: String,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Success rate of alignment against perturbation magnitude.
    BenchRoa {
        dict: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated magnitudes (fraction of frame width for tx/ty and
        /// scale, degrees for rot).
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        magnitudes: Vec<f64>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        opts: AlignOpts,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Per-query alignment time over seeded synthetic dictionaries.
    BenchScale {
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Training samples per subject.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Subject count in dims mode.
        #[arg(long, default_value_t = 5)]
        subjects: usize,
        /// Frame in subjects mode.
        #[arg(long, value_parser = parse_frame, default_value = "40x35")]
        frame: Frame,
        /// Frames swept in dims mode.
        #[arg(long, value_parser = parse_frame, value_delimiter = ',', default_value = "40x35,64x56,80x70")]
        frames: Vec<Frame>,
        /// Subject counts swept in subjects mode.
        #[arg(long, value_delimiter = ',', default_value = "5,25,50")]
        subject_counts: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_S)]
        s: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        subjects: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        heldout: usize,
        #[arg(long, default_value_t = 0)]
        outside: usize,
        #[arg(long, value_parser = parse_frame, default_value = "40x35")]
        frame: Frame,
        #[arg(long, default_value_t = 4)]
        blobs: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct AlignOpts {
    /// Face box `x,y,w,h` in the image (default: the whole image).
    #[arg(long)]
    init: Option<String>,
    #[arg(long, default_value_t = mrlr::align::DEFAULT_SIGMA)]
    sigma: f64,
    /// Truncated dictionary size (implies mrlr2).
    #[arg(long)]
    s: Option<usize>,
    #[arg(long, default_value_t = mrlr::align::DEFAULT_MAX_OUTER)]
    max_outer: usize,
    #[arg(long, default_value_t = mrlr::align::DEFAULT_MAX_INNER)]
    max_inner: usize,
    #[arg(long, default_value_t = mrlr::align::DEFAULT_TOL_STEP)]
    tol: f64,
    /// mrlr1 (all atoms, penalized) or mrlr2 (truncated).
    #[arg(long, default_value = "mrlr2")]
    variant: String,
    /// Leave outside-data atoms out of alignment.
    #[arg(long)]
    no_outside: bool,
}

enum Failure {
    Usage(String),
    Run(MrlrError),
}

impl From<MrlrError> for Failure {
    fn from(e: MrlrError) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn parse_frame(s: &str) -> Result<Frame, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    let w: usize = w.trim().parse().map_err(|_| format!("invalid width {w:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("invalid height {h:?}"))?;
    Frame::new(w, h).map_err(|e| e.to_string())
}

fn parse_rect(s: &str) -> CliResult<Rect> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("--init expects x,y,w,h, got {s:?}")))?;
    match v[..] {
        [x, y, width, height] => Ok(Rect { x, y, width, height }),
        _ => Err(Failure::Usage(format!("--init expects four values, got {}", v.len()))),
    }
}

impl AlignOpts {
    fn config(&self, dict: &Dictionary) -> CliResult<AlignConfig> {
        let s = match (self.variant.as_str(), self.s) {
            ("mrlr1", None) => None,
            ("mrlr1", Some(_)) => return Err(Failure::Usage("--s applies only to mrlr2".into())),
            ("mrlr2", Some(s)) => Some(s),
            ("mrlr2", None) => Some(DEFAULT_S.min(dict.len())),
            (other, _) => return Err(Failure::Usage(format!("unknown variant {other:?} (expected mrlr1 or mrlr2)"))),
        };
        Ok(AlignConfig {
            sigma: self.sigma,
            s,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            tol_step: self.tol,
            use_outside: !self.no_outside,
        })
    }

    fn initial(&self, image: &mrlr::Image, frame: Frame) -> CliResult<SimilarityParams> {
        let rect = match &self.init {
            Some(s) => parse_rect(s)?,
            None => Rect {
                x: 0.0,
                y: 0.0,
                width: image.width() as f64,
                height: image.height() as f64,
            },
        };
        Ok(SimilarityParams::from_rect(rect, frame)?)
    }
}

/// Writes through a sibling temporary file so a failed run leaves nothing
/// behind at `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    let result = fs::File::create(&tmp).and_then(|mut f| {
        f.write_all(bytes)?;
        f.sync_all()
    });
    if let Err(e) = result.and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(MrlrError::Io(e).into());
    }
    Ok(())
}

fn emit(output: Option<&Path>, text: &str) -> CliResult<()> {
    match output {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::BuildDict { dataset, frame, outside, output } => {
            let dict = build_dictionary(&dataset, frame, outside)?;
            write_atomic(&output, &dict.to_bytes())
        }
        Command::Align { dict, image, opts, output, trace } => {
            let dict = load_dictionary(&dict)?;
            let img = load_pgm(&image)?;
            let cfg = opts.config(&dict)?;
            let tau0 = opts.initial(&img, dict.frame())?;
            let result = mrlr::align(&img, &dict, &tau0, &cfg)?;
            let trace_path = trace.unwrap_or_else(|| {
                let mut p = output.clone().into_os_string();
                p.push(".trace.txt");
                PathBuf::from(p)
            });
            write_atomic(&output, &write_pgm(&result.aligned))?;
            if let Err(e) = write_atomic(&trace_path, Trace::from(&result).to_text().as_bytes()) {
                let _ = fs::remove_file(&output);
                return Err(e);
            }
            Ok(())
        }
        Command::Recognize { dict, image, opts, coder, lambda } => {
            let dict = load_dictionary(&dict)?;
            let img = load_pgm(&image)?;
            let cfg = opts.config(&dict)?;
            let tau0 = opts.initial(&img, dict.frame())?;
            let coder: Coder = coder.parse().map_err(|e: MrlrError| Failure::Usage(e.to_string()))?;
            let (label, _, coding) = recognize_pipeline(&img, &dict, &tau0, &cfg, coder, lambda)?;
            let mut out = format!("predicted={label}\nlabel,residual\n");
            for (l, r) in &coding.class_residuals {
                out.push_str(&format!("{l},{r}\n"));
            }
            emit(None, &out)
        }
        Command::BenchRoa { dict, axis, magnitudes, trials, seed, opts, output } => {
            let axis: PerturbAxis = axis.parse().map_err(|e: MrlrError| Failure::Usage(e.to_string()))?;
            if trials == 0 {
                return Err(Failure::Usage("--trials must be at least 1".into()));
            }
            let dict = load_dictionary(&dict)?;
            let probes = atom_probes(&dict)?;
            // Each probe leaves its own atom out.
            let pool = dict.len() - 1;
            let mut cfg = opts.config(&dict)?;
            cfg.s = cfg.s.map(|s| s.min(pool));
            let rows = region_of_attraction(&dict, &probes, axis, &magnitudes, trials, seed, &cfg, default_threads())?;
            emit(output.as_deref(), &roa_csv(&rows))
        }
        Command::BenchScale {
            mode,
            seed,
            samples,
            subjects,
            frame,
            frames,
            subject_counts,
            s,
            reps,
            output,
        } => {
            let mode: ScaleMode = mode.parse().map_err(|e: MrlrError| Failure::Usage(e.to_string()))?;
            if reps < MIN_REPS {
                return Err(Failure::Usage(format!("--reps must be at least {MIN_REPS}")));
            }
            let mut cfg = ScaleConfig::new(mode);
            cfg.base = SynthSpec {
                seed,
                samples,
                subjects,
                frame,
                ..SynthSpec::default()
            };
            cfg.frames = frames;
            cfg.subject_counts = subject_counts;
            cfg.s = s;
            cfg.reps = reps;
            let rows = run_scale(&cfg)?;
            emit(output.as_deref(), &scale_csv(&rows))
        }
        Command::Synth {
            seed,
            subjects,
            samples,
            heldout,
            outside,
            frame,
            blobs,
            noise,
            output,
        } => {
            let spec = SynthSpec {
                seed,
                subjects,
                samples,
                heldout,
                outside,
                frame,
                blobs,
                noise,
            };
            let existed = output.exists();
            generate(&spec, &output).map(|_| ()).map_err(|e| {
                if !existed {
                    let _ = fs::remove_dir_all(&output);
                }
                e.into()
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("mrlr: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("mrlr: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("mrlr: {}", e.to_string().replace('\n', " "));
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
