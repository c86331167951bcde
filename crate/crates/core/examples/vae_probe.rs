use std::time::Instant;
use semsr::diffusion::vae::*;
use semsr::toydata::*;
use semsr::*;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args[1].parse().unwrap();
    let crop: usize = args[2].parse().unwrap();
    let lr: f64 = args[3].parse().unwrap();
    let sc = SceneConfig { size: 64, ..Default::default() };
    let imgs: Vec<ImageTensor> = (0..512).map(|i| generate_scene(&sc, i).unwrap().image).collect();
    let held: Vec<ImageTensor> = (10_000..10_064).map(|i| generate_scene(&sc, i).unwrap().image).collect();
    let t = Instant::now();
    let (_, rep) = train_vae(&VaeArch::default(), &imgs, &held, &VaeTrainConfig { iterations: iters, crop_size: crop, learning_rate: lr, ..Default::default() }, 0, |s, l| if s % 100 == 0 { println!("{s} {l:.5} {:.0}s", t.elapsed().as_secs_f64()) })?;
    println!("psnr {:.2} -> {:.2}, scale {:.3}, {:.0}s", rep.initial_psnr, rep.final_psnr, rep.latent_scale, t.elapsed().as_secs_f64());
    Ok(())
}
