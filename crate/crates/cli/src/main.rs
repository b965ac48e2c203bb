//! `sglight` command-line tool.
//!
//! Every subcommand exits 0 on success. Failures print one line
//! `error: <kind>: <message>` to stderr and exit with status 1.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sglight::brdf::render;
use sglight::envmap::{EnvironmentMap, HdrImage};
use sglight::metrics::{mask_from_values, MaskedPair, Metric};
use sglight::multiview::{depth_projection_error, multiview_mask, multiview_weight};
use sglight::scene::Scene;
use sglight::sg::format_lobe;
use sglight::sgfit::{fit_sg, FitConfig};
use sglight::vsg::{bench_orders, random_rays, trace, Order};
use sglight::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sglight", version, about = "Spherical-Gaussian lighting: fitting, rendering, VSG tracing, reprojection, metrics")]
struct Cli {
    /// Seed for every random choice; overrides the scene's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit an SG mixture to an equirectangular PFM environment map.
    Fit {
        target: PathBuf,
        #[arg(long, default_value_t = 3)]
        lobes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
    },
    /// Render full, diffuse and specular images of the scene's G-buffer.
    Render {
        scene: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Trace camera rays through the scene's VSG volume.
    VsgTrace {
        scene: PathBuf,
        #[arg(long, default_value = "after")]
        order: Order,
        /// Samples per ray (default: the scene's `nr`).
        #[arg(long)]
        nr: Option<usize>,
        /// Camera to trace from (default: the G-buffer camera, else the first).
        #[arg(long)]
        camera: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time both compositing orders over random rays.
    BenchOrder {
        scene: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        rays: usize,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        nr_sweep: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth projection errors, view weights and masks for every target pixel.
    Reproject {
        scene: PathBuf,
        #[arg(long)]
        target: usize,
        /// Error image, weight image, mask text file.
        #[arg(long, num_args = 3, value_names = ["E_PFM", "W_PFM", "M_TXT"])]
        out: Vec<PathBuf>,
    },
    /// Compare two PFM images with one of the masked metrics g1..g6.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        metric: Metric,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn cmd_fit(target: &Path, lobes: usize, out: &Path, max_iter: usize, seed: u64) -> Result<()> {
    let env = EnvironmentMap::from_image(&HdrImage::read_pfm(target)?)?;
    let cfg = FitConfig { num_lobes: lobes, max_iterations: max_iter, seed, ..FitConfig::default() };
    let fit = fit_sg(&env, &cfg)?;
    let mut text = String::new();
    for lobe in fit.env.lobes() {
        let _ = writeln!(text, "{}", format_lobe(lobe));
    }
    let _ = writeln!(text, "# loss={} iterations={} converged={}", fit.loss, fit.iterations, fit.converged);
    write_text(out, &text)
}

fn cmd_render(scene: &Scene, prefix: &str) -> Result<()> {
    let (g, cam) = scene.load_gbuffer()?;
    let env = scene.load_environment()?;
    let out = render(&g, &env, &cam, &scene.render.config)?;
    out.full.write_pfm(format!("{prefix}_full.pfm"))?;
    out.diffuse.write_pfm(format!("{prefix}_diffuse.pfm"))?;
    out.specular.write_pfm(format!("{prefix}_specular.pfm"))
}

fn cmd_vsg_trace(scene: &Scene, order: Order, nr: Option<usize>, camera: Option<usize>, out: &Path) -> Result<()> {
    use rayon::prelude::*;
    let vol = scene.load_volume()?;
    let k = camera.or(scene.gbuffer.as_ref().map(|g| g.camera)).unwrap_or(*scene.cameras.keys().next().expect("scene has a camera"));
    let cam = scene.camera(k)?.camera;
    let n_r = nr.unwrap_or(scene.render.n_r);
    let (w, h) = (cam.width(), cam.height());
    let origin = cam.center();
    let pixels = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let dir = cam.unproject((p % w) as f64, (p / w) as f64, 1.0) - origin;
            trace(&vol, origin, dir, n_r, order, scene.render.interp)
        })
        .collect::<Result<Vec<_>>>()?;
    HdrImage::from_rgb(w, h, &pixels)?.write_pfm(out)
}

fn cmd_bench_order(scene: &Scene, rays: usize, sweep: &[usize], runs: usize, out: &Path, seed: u64) -> Result<()> {
    if sweep.is_empty() {
        return Err(Error::Domain("--nr-sweep needs at least one value".into()));
    }
    let vol = scene.load_volume()?;
    let rays = random_rays(&vol, rays, seed);
    let mut csv = String::from("order,n_r,rays,g_evals,seconds\n");
    for &n_r in sweep {
        let r = bench_orders(&vol, &rays, n_r, runs, scene.render.interp)?;
        let _ = writeln!(csv, "before,{},{},{},{}", r.n_r, r.rays, r.g_evals_before, r.seconds_before);
        let _ = writeln!(csv, "after,{},{},{},{}", r.n_r, r.rays, r.g_evals_after, r.seconds_after);
    }
    write_text(out, &csv)
}

fn cmd_reproject(scene: &Scene, target: usize, out: &[PathBuf]) -> Result<()> {
    let set = scene.load_multiview(target)?;
    let t = set.target().camera;
    let (w, h, k) = (t.width(), t.height(), set.len());
    let mut e_img = vec![0.0; w * h * k];
    let mut w_img = vec![0.0; w * h * k];
    let mut masks = String::new();
    for y in 0..h {
        for x in 0..w {
            let e = match depth_projection_error(&set, (x, y)) {
                Ok(e) => e,
                // no usable target depth: every view counts as unreachable
                Err(Error::Domain(_)) => vec![f64::INFINITY; k],
                Err(err) => return Err(err),
            };
            let weights = multiview_weight(&e, scene.render.log_base);
            for v in 0..k {
                e_img[(v * h + y) * w + x] = e[v];
                w_img[(v * h + y) * w + x] = weights[v];
            }
            let m = multiview_mask(&e, scene.render.mask_threshold);
            let _ = write!(masks, "{x} {y}");
            for b in m {
                let _ = write!(masks, " {b}");
            }
            masks.push('\n');
        }
    }
    HdrImage::from_scalars(w, h * k, &e_img)?.write_pfm(&out[0])?;
    HdrImage::from_scalars(w, h * k, &w_img)?.write_pfm(&out[1])?;
    write_text(&out[2], &masks)
}

fn cmd_metrics(a: &Path, b: &Path, mask: Option<&Path>, metric: Metric) -> Result<f64> {
    let (ia, ib) = (HdrImage::read_pfm(a)?, HdrImage::read_pfm(b)?);
    if ia.width() != ib.width() || ia.height() != ib.height() || ia.channels() != ib.channels() {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            ia.width(),
            ia.height(),
            ia.channels(),
            ib.width(),
            ib.height(),
            ib.channels()
        )));
    }
    let flags = match mask {
        Some(m) => {
            let im = HdrImage::read_pfm(m)?;
            if im.width() != ia.width() || im.height() != ia.height() {
                return Err(Error::Shape("mask size differs from the images".into()));
            }
            mask_from_values(&im.to_scalar_vec())
        }
        None => vec![true; ia.pixels()],
    };
    let (va, vb) = (ia.to_f64_vec(), ib.to_f64_vec());
    metric.eval(&MaskedPair::new(&va, &vb, &flags, ia.channels())?)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Domain("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    }
    let seed_for = |scene: Option<&Scene>| cli.seed.or(scene.and_then(|s| s.render.seed)).unwrap_or(0);
    match &cli.command {
        Command::Fit { target, lobes, out, max_iter } => cmd_fit(target, *lobes, out, *max_iter, seed_for(None)),
        Command::Render { scene, out_prefix } => cmd_render(&Scene::read(scene)?, out_prefix),
        Command::VsgTrace { scene, order, nr, camera, out } => cmd_vsg_trace(&Scene::read(scene)?, *order, *nr, *camera, out),
        Command::BenchOrder { scene, rays, nr_sweep, runs, out } => {
            let s = Scene::read(scene)?;
            cmd_bench_order(&s, *rays, nr_sweep, *runs, out, seed_for(Some(&s)))
        }
        Command::Reproject { scene, target, out } => cmd_reproject(&Scene::read(scene)?, *target, out),
        Command::Metrics { a, b, mask, metric } => {
            let v = cmd_metrics(a, b, mask.as_deref(), *metric)?;
            println!("{v}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
