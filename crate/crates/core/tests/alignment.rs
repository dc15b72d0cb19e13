use emflow_core::imageops::{align_sections, match_pair, AlignParams, SpringParams};
use emflow_core::synth::{smooth_warp, textured_image, warp_image};
use image::GrayImage;

fn interior_residual(a: &GrayImage, b: &GrayImage, p: &AlignParams) -> f64 {
    let f = match_pair(a, b, p).unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    for r in 1..f.rows - 1 {
        for c in 1..f.cols - 1 {
            let v = f.get(c, r);
            sum += ((v.dx * v.dx + v.dy * v.dy) as f64).sqrt();
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn warped_stack_residual_drops() {
    let base = textured_image(320, 320, 4.0, 77);
    let sections: Vec<GrayImage> = (0..16).map(|i| warp_image(&base, smooth_warp(6.0, 600.0, 1000 + i))).collect();
    let p = AlignParams {
        spring: SpringParams { grid_spacing: 32, ..SpringParams::default() },
        patch_radius: 16,
        search_radius: 10,
        ..AlignParams::default()
    };
    let t = std::time::Instant::now();
    let (aligned, stack) = align_sections(&sections, &p).unwrap();
    let before: f64 = (1..16).map(|i| interior_residual(&sections[i - 1], &sections[i], &p)).sum::<f64>() / 15.0;
    let after: f64 = (1..16).map(|i| interior_residual(&aligned[i - 1], &aligned[i], &p)).sum::<f64>() / 15.0;
    eprintln!("before {before:.3} after {after:.3} reduction {:.3} in {:?}", 1.0 - after / before, t.elapsed());
    for r in &stack.relax {
        assert!(r.energies.windows(2).all(|w| w[1] <= w[0]), "section {}", r.section);
    }
    assert!(after <= 0.2 * before);
}
