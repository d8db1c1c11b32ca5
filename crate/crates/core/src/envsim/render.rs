//! Ego-centred, heading-up bird's-eye-view rasterizer.
//!
//! Fixed palette: off-road `GRASS`, drivable surface `ROAD`, lane markings
//! `MARKING`, the ego vehicle `EGO`, other vehicles `TRAFFIC`.

use std::io::Write;
use std::path::Path;

use super::geometry::{heading_vec, left_of, Vec2};
use super::road::{Marking, Road};
use super::vehicle::VehicleState;

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

pub const GRASS: [u8; 3] = [34, 85, 34];
pub const ROAD: [u8; 3] = [96, 96, 96];
pub const MARKING: [u8; 3] = [230, 230, 230];
pub const EGO: [u8; 3] = [40, 200, 255];
pub const TRAFFIC: [u8; 3] = [240, 170, 20];

const DASH_PERIOD: f64 = 9.0;

/// Rasterize the scene around `ego` at `meters_per_pixel`.
pub fn render_bev(road: &Road, ego: &VehicleState, traffic: &[VehicleState], meters_per_pixel: f64) -> Vec<u8> {
    let half = IMAGE_SIZE as f64 / 2.0;
    let fwd = heading_vec(ego.heading);
    let left = left_of(fwd);
    let view_radius = half * meters_per_pixel * std::f64::consts::SQRT_2 + 4.0;
    let visible: Vec<_> = traffic
        .iter()
        .filter(|v| (v.position - ego.position).norm() <= view_radius)
        .map(|v| v.footprint())
        .collect();
    let ego_box = ego.footprint();
    let band = meters_per_pixel;

    let mut img = vec![0u8; IMAGE_BYTES];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let f = (half - (row as f64 + 0.5)) * meters_per_pixel;
            let l = (half - (col as f64 + 0.5)) * meters_per_pixel;
            let p: Vec2 = ego.position + fwd * f + left * l;
            let color = if ego_box.contains(p) {
                EGO
            } else if visible.iter().any(|b| b.contains(p)) {
                TRAFFIC
            } else {
                surface_color(road, p, band)
            };
            img[(row * IMAGE_SIZE + col) * 3..][..3].copy_from_slice(&color);
        }
    }
    img
}

fn surface_color(road: &Road, p: Vec2, band: f64) -> [u8; 3] {
    let (mut on, mut deep, mut marked) = (false, false, false);
    for sf in &road.surfaces {
        let halfw = sf.width / 2.0;
        if !sf.line.near_bbox(p, halfw) {
            continue;
        }
        let c = sf.line.project(p, None);
        if c.s < 0.0 || c.s > sf.line.length() || c.lateral.abs() > halfw {
            continue;
        }
        on = true;
        if c.lateral.abs() < halfw - band {
            deep = true;
            continue;
        }
        let kind = if c.lateral > 0.0 { sf.left } else { sf.right };
        marked |= match kind {
            Marking::None => false,
            Marking::Solid => true,
            Marking::Dashed => c.s.rem_euclid(DASH_PERIOD) < DASH_PERIOD / 2.0,
        };
    }
    if marked && !deep {
        MARKING
    } else if on {
        ROAD
    } else {
        GRASS
    }
}

/// Binary PPM (P6) of a 64×64 RGB frame.
pub fn write_ppm(path: &Path, image: &[u8]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n")?;
    f.write_all(image)?;
    f.flush()
}
