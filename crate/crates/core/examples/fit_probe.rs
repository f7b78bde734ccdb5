use nalgebra::DVector;
use warpfit::estimation::*;
use warpfit::inference::peak_stats;
use warpfit::model::{LatentState, VarianceParams};
use warpfit::synth::{generate, SynthConfig};
use warpfit::MaternKernel;

fn main() {
    let cfg = SynthConfig::like_paper(7);
    let model = ModelSpec::defaults();
    let out = generate(&cfg, &model).unwrap();
    let vp = VarianceParams::new(MaternKernel::new(0.072, 7.21, 0.458).unwrap(), 0.026, 0.083).unwrap();
    let fit_cfg = FitConfig::default();

    // manual alternation: link-init -> update_coeffs -> sweeps
    let smooth = |y: &[f64]| -> Vec<f64> {
        (0..y.len()).map(|k| {
            let mut num = 2.0 * y[k];
            let mut den = 2.0;
            if k > 0 { num += y[k-1]; den += 1.0; }
            if k + 1 < y.len() { num += y[k+1]; den += 1.0; }
            num / den
        }).collect()
    };
    let mut latents = LatentState {
        u: out.dataset.curves().iter().map(|c| DVector::from_iterator(
            c.len(), smooth(c.observations()).iter().map(|&y| (y + 0.5_f64).ln()))).collect(),
        w: out.dataset.curves().iter().map(|_| DVector::zeros(7)).collect(),
    };
    let mut coeffs = update_coeffs(&out.dataset, &out.truth.family, &model, &latents, &vp).unwrap();

    for sweep in 0..8 {
        // predict latents per curve
        let c_prior = vp.warp_prior(&model.warp).unwrap();
        let mut eq3 = 0.0;
        let mut wmax: f64 = 0.0;
        for (i, curve) in out.dataset.curves().iter().enumerate() {
            let s = vp.amplitude_cov(curve.times()).unwrap();
            let ctx = warpfit::model::CurveContext::new(curve, &out.truth.family, &model.basis, &model.warp, &s, &c_prior);
            let cg = coeffs.get(curve.group()).unwrap();
            let (u, w) = predict_latents(&ctx, cg, Some((&latents.u[i], &latents.w[i])), &fit_cfg).unwrap();
            eq3 += ctx.posterior_nll(cg, &u, &w).unwrap();
            wmax = wmax.max(w.amax());
            latents.u[i] = u;
            latents.w[i] = w;
        }
        coeffs = update_coeffs(&out.dataset, &out.truth.family, &model, &latents, &vp).unwrap();
        let peaks: Vec<f64> = out.dataset.groups().iter().map(|g| {
            peak_stats(coeffs.get(g).unwrap(), &model.basis, 120.0).unwrap().location_hours
        }).collect();
        println!("sweep {sweep}: eq3 {eq3:10.3}  wmax {wmax:.4}  peaks {:?}", peaks);
    }
    // inspect the fitted warm curve and its latents
    let cw = coeffs.get("warm").unwrap();
    print!("theta_warm: ");
    for i in 0..=24 {
        let t = i as f64 / 24.0;
        print!("{:.2} ", model.basis.eval(cw, t).unwrap());
    }
    println!();
    for (i, curve) in out.dataset.curves().iter().enumerate() {
        if curve.group() == "warm" {
            println!("{}: w = {:?}", curve.id(), latents.w[i].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
            println!("   y = {:?}", curve.observations());
        }
    }
}
