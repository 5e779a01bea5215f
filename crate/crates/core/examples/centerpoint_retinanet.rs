//! Fits a Centerpoint RetinaNet to one synthetic chip and prints what it
//! finds. Pass `box` to train the horizontal-box baseline instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use centerpoint::data::{generate_synthetic_scene, SyntheticSpec};
use centerpoint::nn::Sgd;
use centerpoint::single_stage::{HeadKind, SingleStageConfig, SingleStageDetector};

fn main() -> centerpoint::Result<()> {
    let head = match std::env::args().nth(1).as_deref() {
        Some("box") => HeadKind::Box,
        _ => HeadKind::Centerpoint,
    };
    let spec = SyntheticSpec { width: 128, height: 128, count: Some(8), ..Default::default() };
    let chip = generate_synthetic_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5), "demo")?.as_chip();

    let cfg = SingleStageConfig { head, ..Default::default() };
    let mut model = SingleStageDetector::new(cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("{head:?} head, {} parameters", model.store.num_scalars());
    let opt = Sgd { clip_norm: Some(10.0), ..Default::default() };
    for step in 0..200 {
        model.store.zero_grad();
        let loss = model.accumulate_gradients(&[&chip])?;
        opt.step(&mut model.store, 0.01 * ((step + 1) as f32 / 20.0).min(1.0));
        if step % 50 == 0 {
            println!("step {step:>3}  cls {:.4}  reg {:.4}", loss.classification(), loss.regression());
        }
    }

    for d in model.detect(&chip).iter().filter(|d| d.score > 0.5) {
        let gt = chip
            .objects
            .iter()
            .filter(|o| o.class_id == d.class_id)
            .map(|o| o.center.distance(&d.center))
            .fold(f64::INFINITY, f64::min);
        println!("class {} at ({:6.1}, {:6.1}) score {:.2}  nearest GT {gt:.2} px", d.class_id, d.center.x, d.center.y, d.score);
    }
    Ok(())
}
