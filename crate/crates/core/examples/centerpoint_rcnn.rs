//! Centerpoint R-CNN: RPN proposals with imputed windows, the attention
//! mask and a short fit on one chip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use centerpoint::backbone::chips_to_tensor;
use centerpoint::data::{generate_synthetic_scene, SyntheticSpec};
use centerpoint::nn::{Graph, Sgd};
use centerpoint::two_stage::{LossSelection, MaskMode, TwoStageConfig, TwoStageDetector};

fn main() -> centerpoint::Result<()> {
    let window: f64 = std::env::args().nth(1).map_or(Ok(70.0), |s| s.parse()).expect("window size");
    let spec = SyntheticSpec { width: 128, height: 128, count: Some(8), ..Default::default() };
    let chip = generate_synthetic_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5), "demo")?.as_chip();
    let cfg = TwoStageConfig { window_size: window, ..Default::default() };
    let mut model = TwoStageDetector::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;

    let opt = Sgd { clip_norm: Some(10.0), ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for step in 0..300 {
        model.store.zero_grad();
        let l = model.accumulate_gradients(&[&chip], &mut rng, LossSelection::ALL)?;
        opt.step(&mut model.store, 0.01 * ((step + 1) as f32 / 20.0).min(1.0));
        if step % 75 == 0 {
            let g = |k: &str| l.get(k).unwrap_or(0.0);
            println!(
                "step {step:>3}  rpn_cls {:.3}  rpn_loc {:.3}  cls {:.3}  loc {:.3}",
                g("loss_rpn_cls"),
                g("loss_rpn_loc"),
                g("loss_cls"),
                g("loss_loc")
            );
        }
    }

    // Proposals and the pooled mask of the strongest one
    let mut g = Graph::new(false);
    let x = g.input(chips_to_tensor(&[&chip]));
    let pyr = model.backbone_forward(&mut g, x);
    let rpn = model.rpn_forward(&mut g, &pyr);
    let props = model.select_proposals(&g, &rpn, 0, 300, 5);
    for p in &props {
        println!("proposal ({:6.1}, {:6.1}) objectness {:.3}", p.center.x, p.center.y, p.objectness);
    }
    if let Some(p) = props.first() {
        let feats = model.extract_roi_features(&mut g, &pyr, &rpn, &[(0, *p)], MaskMode::SigmoidThenPool);
        let m = g.value(feats[0].m.expect("mask"));
        let k = model.config.pooler_resolution;
        println!("pooled mask around the top proposal:");
        for r in (0..k).step_by(2) {
            let row: Vec<String> = (0..k).step_by(2).map(|c| format!("{:.2}", m.data()[r * k + c])).collect();
            println!("  {}", row.join(" "));
        }
    }

    let dets = model.detect(&chip);
    let hits = chip
        .objects
        .iter()
        .filter(|o| dets.iter().any(|d| d.class_id == o.class_id && d.score > 0.5 && d.center.distance(&o.center) <= 3.0))
        .count();
    println!("{hits}/{} objects recovered within 3 px", chip.objects.len());
    Ok(())
}
