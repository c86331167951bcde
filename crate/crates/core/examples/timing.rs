use std::time::Instant;
use semsr::dape::*;
use semsr::degradation::DegradationConfig;
use semsr::degradation::synthesize_batch;
use semsr::diffusion::schedule::ScheduleConfig;
use semsr::diffusion::train::*;
use semsr::diffusion::vae::*;
use semsr::diffusion::*;
use semsr::teacher::*;
use semsr::toydata::*;
use semsr::*;

struct Clock(Vec<Instant>);
impl Clock {
    fn tick(&mut self) { self.0.push(Instant::now()); }
    fn report(&mut self, label: &str) {
        let v = &self.0;
        if v.len() > 1 {
            let per = (v[v.len() - 1] - v[0]).as_secs_f64() / (v.len() - 1) as f64;
            println!("{label}: {per:.3}s/step");
        }
        self.0.clear();
    }
}

fn main() -> Result<()> {
    let mut c = Clock(Vec::new());
    let n: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let sc = SceneConfig { size: 64, ..Default::default() };
    let scenes: Vec<_> = (0..64).map(|i| generate_scene(&sc, i).unwrap()).collect();
    let imgs: Vec<ImageTensor> = scenes.iter().map(|s| s.image.clone()).collect();
    let tags: Vec<_> = scenes.iter().map(|s| s.tags.clone()).collect();
    let vocab = toy_vocabulary();
    let arch = TaggerArch::default();
    let (teacher, _) = train_teacher(&arch, &vocab, &imgs, &tags, &imgs[..16], &tags[..16], &TeacherTrainConfig { iterations: n, ..Default::default() }, 0, |_, _| c.tick())?;
    c.report("teacher");
    let tck = teacher.to_checkpoint(0)?;
    let deg = DegradationConfig::default();
    let seeds: Vec<u64> = (0..16).collect();
    let pairs = synthesize_batch(&imgs[..16], &deg, &seeds, Execution::default())?;
    let lrs: Vec<ImageTensor> = pairs.iter().map(|p| p.0.clone()).collect();
    let (dape, _) = train_dape(&tck, &imgs, HeldOut { hr: &imgs[..16], lr: &lrs, tags: &tags[..16] }, &deg, &DapeTrainConfig { iterations: n, ..Default::default() }, 0, Execution::default(), |_, _| c.tick())?;
    c.report("dape");
    let (vae, _) = train_vae(&VaeArch::default(), &imgs, &imgs[..16], &VaeTrainConfig { iterations: n, ..Default::default() }, 0, |_, _| c.tick())?;
    c.report("vae");
    let lat = vae.encode_all(&imgs)?;
    let sched = ScheduleConfig::default().build()?;
    for (widths, heads, bs) in [([32, 64], 2, 8), ([32, 64], 4, 8), ([32, 64], 2, 16)] {
        let ua = UNetArch { widths, heads, ..Default::default() };
            let (base, _) = train_base(&ua, &TextConfig::default(), &vocab, LatentSet { latents: &lat, tags: &tags }, LatentSet { latents: &lat[..16], tags: &tags[..16] }, &sched, &BaseTrainConfig { iterations: n, batch_size: bs, ..Default::default() }, 0, |_, _| c.tick())?;
        c.report(&format!("base {widths:?} h{heads} b{bs}"));
        let bck = base.to_checkpoint(0)?;
            let _ = train_sr(SrInputs { base: &bck, vae: &vae, dape: &dape, schedule: &sched, degradation: &deg }, &imgs, &lat, SrPairs { latents: &lat[..16], lr: &lrs }, &SrTrainConfig { iterations: n, batch_size: bs, ..Default::default() }, 0, Execution::default(), |_, _| c.tick())?;
        c.report(&format!("sr {widths:?} h{heads} b{bs}"));
    }
    Ok(())
}
