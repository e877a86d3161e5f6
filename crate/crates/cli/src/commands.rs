use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatbridge::raster::{look_at, render, Image, Intrinsics};
use splatbridge::recon::{plan_capture, train_splats, CapturePlan, PosedImage, Ring};
use splatbridge::splat::{encode_splat_binary, load_ply, load_splat_binary, save_ply};
use splatbridge::{Gaussian3D, Session, SplatScene};

use crate::config::Config;
use crate::CliError;

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or_default().to_ascii_lowercase()
}

pub fn load_scene(path: &Path) -> Result<SplatScene, CliError> {
    let bytes = read(path)?;
    let parsed = match extension(path).as_str() {
        "ply" => load_ply(&bytes),
        "splat" => load_splat_binary(&bytes),
        other => return Err(CliError::Usage(format!("{}: unknown scene extension `{other}`", path.display()))),
    };
    parsed.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn save_scene(path: &Path, scene: &SplatScene) -> Result<(), CliError> {
    let bytes = match extension(path).as_str() {
        "ply" => save_ply(scene),
        "splat" => encode_splat_binary(scene),
        other => return Err(CliError::Usage(format!("{}: unknown scene extension `{other}`", path.display()))),
    };
    write(path, &bytes)
}

/// Parses `x,y,z`.
pub fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    <[f64; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraArgs {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

pub fn cmd_render(scene: &Path, cam: &CameraArgs, background: [f64; 3], out: &Path) -> Result<(), CliError> {
    let ext = extension(out);
    if ext != "ppm" && ext != "rgb" {
        return Err(CliError::Usage(format!("{}: output must end in .ppm or .rgb", out.display())));
    }
    let scene = load_scene(scene)?;
    let c2w = look_at(&Point3::from(cam.eye), &Point3::from(cam.target), &Vector3::from(cam.up))
        .map_err(|e| CliError::Usage(format!("camera: {e}")))?;
    let camera = Intrinsics::centered(cam.focal, cam.width, cam.height).with_pose(c2w.inverse());
    camera.validate().map_err(|e| CliError::Usage(format!("camera: {e}")))?;
    let image = render(&scene, &camera, background);
    write(out, &if ext == "ppm" { image.to_ppm() } else { image.to_rgb8() })
}

pub fn cmd_convert(input: &Path, output: &Path) -> Result<(), CliError> {
    save_scene(output, &load_scene(input)?)
}

pub fn cmd_plan(center: [f64; 3], rings: &[Ring], out: Option<&Path>) -> Result<(), CliError> {
    let plan = plan_capture(&Point3::from(center), rings).map_err(|e| CliError::Usage(e.to_string()))?;
    match out {
        Some(p) => write(p, plan.to_text().as_bytes()),
        None => std::io::stdout().write_all(plan.to_text().as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}

/// Parses `radius:height:count`.
pub fn parse_ring(s: &str) -> Result<Ring, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [r, h, n] = parts[..] else { return Err(format!("expected radius:height:count, got `{s}`")) };
    Ok(Ring {
        radius: r.parse().map_err(|_| format!("bad radius `{r}`"))?,
        height: h.parse().map_err(|_| format!("bad height `{h}`"))?,
        count: n.parse().map_err(|_| format!("bad count `{n}`"))?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArgs {
    pub images: PathBuf,
    pub plan: PathBuf,
    pub out: PathBuf,
    pub focal: f64,
    pub init: Option<PathBuf>,
    pub gaussians: usize,
}

/// Views are the `.ppm` files of `images` in name order, paired with the
/// plan's poses in order. Writes the scene and `<out>.loss.csv`.
pub fn cmd_train(cfg: &Config, args: &TrainArgs) -> Result<(), CliError> {
    let plan_text = std::fs::read_to_string(&args.plan).map_err(|e| CliError::Io(format!("{}: {e}", args.plan.display())))?;
    let plan = CapturePlan::from_text(&plan_text).map_err(|e| CliError::Usage(format!("{}: {e}", args.plan.display())))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.images)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.images.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| extension(p) == "ppm")
        .collect();
    files.sort();
    if files.len() != plan.poses.len() {
        return Err(CliError::Usage(format!("{} images but {} plan poses", files.len(), plan.poses.len())));
    }
    let views = files
        .iter()
        .zip(&plan.poses)
        .map(|(f, c2w)| {
            let image = Image::from_ppm(&read(f)?).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
            let cam = Intrinsics::centered(args.focal, image.width, image.height).with_pose(c2w.inverse());
            PosedImage::new(image, None, cam).map_err(|e| CliError::Usage(format!("{}: {e}", f.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let init = match &args.init {
        Some(p) => load_scene(p)?,
        None => random_init(&plan, args.gaussians, cfg.train.rng_seed)?,
    };
    let result = train_splats(&views, &init, &cfg.train).map_err(|e| CliError::Usage(e.to_string()))?;
    save_scene(&args.out, &result.scene)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let mut log_path = args.out.clone().into_os_string();
    log_path.push(".loss.csv");
    write(Path::new(&log_path), csv.as_bytes())
}

/// Gaussians scattered uniformly in a cube around the plan's center, sized
/// by the smallest ring radius.
fn random_init(plan: &CapturePlan, n: usize, seed: u64) -> Result<SplatScene, CliError> {
    if n == 0 {
        return Err(CliError::Usage("--gaussians must be positive without --init".into()));
    }
    let half = plan.rings.iter().map(|r| r.radius).fold(f64::INFINITY, f64::min).min(1.0) * 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..n)
        .map(|_| {
            let offset = Vector3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), rng.gen_range(-half..half));
            let color = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            Gaussian3D::isotropic(plan.look_at.coords + offset, half / 4.0, 0.5, color)
        })
        .collect();
    SplatScene::new(gs, "world").map_err(|e| CliError::Usage(e.to_string()))
}

/// Runs until `stop` is set (or SIGINT/SIGTERM), then prints a summary.
pub fn cmd_serve(cfg: &Config, headless: bool, stop: Option<Arc<AtomicBool>>) -> Result<(), CliError> {
    let session = Session::new(cfg.session.clone(), cfg.load_chain()?, cfg.rig.build()?, cfg.load_world()?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut server_cfg = cfg.server.clone();
    if headless {
        server_cfg.ws_listen = None;
    }
    let server = splatbridge::protocol::serve(&server_cfg, session).map_err(|e| CliError::Io(e.to_string()))?;
    eprintln!("listening on {}", server.local_addr());
    if let Some(ws) = server.ws_addr() {
        eprintln!("web socket bridge on {ws}");
    }
    let stop = stop.unwrap_or_else(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
            log::warn!("no signal handler: {e}");
        }
        flag
    });
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    let dropped = server.hub().dropped_total();
    if let Some(s) = server.shutdown() {
        eprintln!("stopped after {} ticks in {} phase; {dropped} messages dropped", s.tick_count(), s.phase());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_and_ring_arguments() {
        assert_eq!(parse_vec3("1, 2,3.5").unwrap(), [1.0, 2.0, 3.5]);
        assert!(parse_vec3("1,2").is_err());
        assert_eq!(parse_ring("0.2:0.4:8").unwrap(), Ring { radius: 0.2, height: 0.4, count: 8 });
        assert!(parse_ring("0.2:0.4").is_err());
    }
}
