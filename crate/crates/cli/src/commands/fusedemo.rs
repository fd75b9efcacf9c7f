use std::path::Path;

use serde::Serialize;

use polyaffine_core::error::Result;
use polyaffine_core::evaluation::two_rotation_scenario;
use polyaffine_core::fusion::{
    build_svf, integrate_svf, jacobian_determinants, naive_fuse, DisplacementField,
};

use crate::FusedemoArgs;

#[derive(Serialize)]
struct FieldStats {
    min_jacobian: f64,
    negative_jacobians: usize,
    interior_voxels: usize,
    image: String,
}

#[derive(Serialize)]
struct Summary {
    angle: f64,
    naive: FieldStats,
    lept: FieldStats,
}

fn stats(field: &DisplacementField, image: &Path) -> FieldStats {
    let dets = jacobian_determinants(field);
    FieldStats {
        min_jacobian: dets.iter().cloned().fold(f64::INFINITY, f64::min),
        negative_jacobians: dets.iter().filter(|&&d| d < 0.0).count(),
        interior_voxels: dets.len(),
        image: image.display().to_string(),
    }
}

/// Rasterize the image of a regular grid under `x -> x + u(x)` into a
/// binary PPM: grid lines every 4 mm, 5 px per mm, deformed lines in black.
fn render_deformed_grid(field: &DisplacementField, path: &Path) -> Result<()> {
    let grid = field.grid();
    let dims = grid.dims();
    let lo = grid.voxel_world(&[0, 0]);
    let hi = grid.voxel_world(&[dims[0] - 1, dims[1] - 1]);
    let scale = 5.0; // px per mm
    let width = (((hi[0] - lo[0]) * scale).ceil() as usize) + 1;
    let height = (((hi[1] - lo[1]) * scale).ceil() as usize) + 1;
    let mut pixels = vec![255u8; width * height * 3];

    let mut plot = |x: f64, y: f64| {
        let px = ((x - lo[0]) * scale).round();
        let py = ((y - lo[1]) * scale).round();
        if px < 0.0 || py < 0.0 {
            return;
        }
        let (px, py) = (px as usize, py as usize);
        if px >= width || py >= height {
            return;
        }
        // Image rows run top-down; world y runs up.
        let row = height - 1 - py;
        let at = 3 * (row * width + px);
        pixels[at] = 0;
        pixels[at + 1] = 0;
        pixels[at + 2] = 0;
    };

    let line_step = 4.0f64;
    let sample_step = 0.05f64;
    let mut warp_plot = |p: [f64; 2]| {
        let u = field.sample_world(&p);
        plot(p[0] + u[0], p[1] + u[1]);
    };
    // Vertical lines x = const, then horizontal lines y = const.
    let mut x = lo[0];
    while x <= hi[0] + 1e-9 {
        let mut t = lo[1];
        while t <= hi[1] + 1e-9 {
            warp_plot([x, t]);
            t += sample_step;
        }
        x += line_step;
    }
    let mut y = lo[1];
    while y <= hi[1] + 1e-9 {
        let mut t = lo[0];
        while t <= hi[0] + 1e-9 {
            warp_plot([t, y]);
            t += sample_step;
        }
        y += line_step;
    }

    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(&pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn run(args: FusedemoArgs) -> Result<()> {
    let (locals, grid, params) = two_rotation_scenario(args.angle)?;

    let naive = naive_fuse(&locals, &grid, &params)?;
    let velocity = build_svf(&grid, &locals, &params)?;
    let lept = integrate_svf(&velocity, params.steps, &grid)?;

    render_deformed_grid(&naive, &args.out_naive)?;
    render_deformed_grid(&lept, &args.out_lept)?;

    let summary = Summary {
        angle: args.angle,
        naive: stats(&naive, &args.out_naive),
        lept: stats(&lept, &args.out_lept),
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}
