use std::path::Path;
use evsplat_core::config::{Profile, RunConfig};
use evsplat_core::crf::CrfNodes;
use evsplat_core::dataset::Dataset;
use evsplat_core::objective::FrameObservation;
use evsplat_core::scene::GaussianScene;
use evsplat_core::se3::Pose;
use evsplat_core::slam::optimize_frame_poses;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ds_path = &args[1];
    let lr: f64 = args[2].parse().unwrap();
    let iters: usize = args[3].parse().unwrap();
    let events_on: bool = args[4].parse().unwrap();
    let verbose: bool = args.get(5).map(|s| s == "v").unwrap_or(false);

    let ds = Dataset::load(Path::new(ds_path)).unwrap();
    let scene = GaussianScene::load(&Path::new(ds_path).join("gt_scene.txt")).unwrap();
    let mut config = RunConfig::from_profile(Profile::Synthetic);
    config.toggles.event_tracking = events_on;
    config.lr.pose = lr;
    config.iters.tracking = iters;
    if let Ok(k) = std::env::var("DBG_K") { config.k_intervals = k.parse().unwrap(); }
    let crf = CrfNodes::identity(config.crf_nodes);
    let gt = ds.gt_traj.clone().unwrap();
    let settings = config.raster.settings();

    let mut log: Vec<(Pose, Pose)> = Vec::new();
    let mut worst: f64 = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..ds.frames {
        let obs = FrameObservation::new(ds.frame_bundle(i).unwrap(), config.k_intervals).unwrap();
        let (init_s, init_e) = if let Some((ps, pe)) = log.last() {
            let rel = pe.compose(&ps.inverse());
            (*pe, rel.compose(pe))
        } else {
            (Pose::identity(), Pose::identity())
        };
        let o = optimize_frame_poses(&obs, &scene, &crf, &config, &ds.intrinsics, &settings, init_s, init_e).unwrap();
        let err = o.end.translation_distance(&gt[i].1);
        let init_err = init_e.translation_distance(&gt[i].1);
        worst = worst.max(err);
        sum_sq += err * err;
        if verbose {
            println!("f{i:02} init {:.4} -> {:.4} r {:.4} (iters {})", init_err, err, o.end.rotation_distance(&gt[i].1), o.iterations);
        }
        log.push((o.start, o.end));
    }
    println!("lr {lr} iters {iters} events {events_on}: rms_end_err {:.4} worst {:.4}",
        (sum_sq / ds.frames as f64).sqrt(), worst);
}
