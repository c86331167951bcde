use std::time::Instant;
use candle_core::{DType, Device, Tensor};
use semsr::diffusion::unet::UNet;
use semsr::diffusion::blocks::AttnDims;
use semsr::diffusion::*;
use semsr::nn::*;
use semsr::*;

fn time<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) -> T {
    let _ = f();
    let t = Instant::now();
    let mut r = None;
    for _ in 0..reps { r = Some(f()); }
    println!("{label}: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    r.unwrap()
}

fn main() -> Result<()> {
    let dev = Device::Cpu;
    for widths in [[32usize, 64], [64, 128]] {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, DType::F32);
        let arch = UNetArch { widths, ..Default::default() };
        let dims = AttnDims { heads: 4, text_dim: 32, rep_dim: 64 };
        let unet = UNet::new(&pb, &arch, dims, None)?;
        let b = 16;
        let z = Tensor::randn(0f32, 1.0, (b, 4, 16, 16), &dev)?;
        let text = Tensor::randn(0f32, 1.0, (b, 16, 32), &dev)?;
        let t: Vec<usize> = (0..b).map(|i| i * 50 + 1).collect();
        time(&format!("{widths:?} unet fwd"), 3, || unet.forward(&z, &t, &text, None).unwrap());
        time(&format!("{widths:?} unet fwd+bwd"), 3, || {
            let y = unet.forward(&z, &t, &text, None).unwrap();
            y.sqr().unwrap().mean_all().unwrap().backward().unwrap()
        });
        let x = Tensor::randn(0f32, 1.0, (b, widths[0], 16, 16), &dev)?;
        let w = candle_core::Var::from_tensor(&Tensor::randn(0f32, 0.1, (widths[0], widths[0], 3, 3), &dev)?)?;
        time(&format!("{widths:?} one conv fwd"), 5, || conv2d(&x, &w, 1, 1).unwrap());
        time(&format!("{widths:?} one conv fwd+bwd"), 5, || conv2d(&x, &w, 1, 1).unwrap().sum_all().unwrap().backward().unwrap());
        let gn = GroupNorm::new(&pb.pp("gn"), 8, widths[0])?;
        use candle_core::Module;
        time(&format!("{widths:?} groupnorm fwd+bwd"), 5, || gn.forward(&x.clone()).unwrap().sum_all().unwrap().backward().unwrap());
        let rb = semsr::diffusion::blocks::ResBlock::new(&pb.pp("rb"), widths[0], widths[0], Some(128))?;
        let temb = Tensor::randn(0f32, 1.0, (b, 128), &dev)?;
        time(&format!("{widths:?} resblock fwd"), 5, || rb.forward(&x, Some(&temb)).unwrap());
        let ab = semsr::diffusion::blocks::AttnBlock::new(&pb.pp("ab"), widths[0], dims, None)?;
        time(&format!("{widths:?} attnblock fwd"), 5, || ab.forward(&x, &text, None).unwrap());
        let xt = semsr::nn::layers::to_tokens(&x)?;
        time(&format!("{widths:?} to_tokens"), 5, || semsr::nn::layers::to_tokens(&x).unwrap().contiguous().unwrap());
        let q = Tensor::randn(0f32, 1.0, (b * 4, 256, widths[0] / 4), &dev)?;
        time(&format!("{widths:?} qk matmul"), 5, || q.matmul(&q.t().unwrap()).unwrap());
        let s2 = q.matmul(&q.t()?)?;
        time(&format!("{widths:?} softmax"), 5, || semsr::nn::layers::softmax_last(&s2).unwrap());
        let ln = LayerNorm::new(&pb.pp("ln"), widths[0])?;
        time(&format!("{widths:?} layernorm"), 5, || ln.forward(&xt).unwrap());
        let _ = xt;
    }
    Ok(())
}
