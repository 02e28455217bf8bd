use serde::{Deserialize, Serialize};

use super::{CameraConfig, CameraKind, WorldState};

pub const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.1];

/// Fixed color table shared by objects, receptacles and the arm marker.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 0.9],
    [0.95, 0.85, 0.1],
    [0.6, 0.2, 0.8],
    [0.1, 0.85, 0.85],
    [0.95, 0.95, 0.95],
    [0.55, 0.55, 0.55],
];

const ARM_COLOR: usize = 5;
const ARM_MARKER_RADIUS: f64 = 0.012;
const RING_WIDTH: f64 = 0.015;

/// Square RGB image, row-major (row, column, channel), row 0 at the top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub resolution: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn filled(resolution: usize, color: [f32; 3]) -> Self {
        let data = std::iter::repeat_n(color, resolution * resolution).flatten().collect();
        Self { resolution, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.resolution + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, c: [f32; 3]) {
        let i = (row * self.resolution + col) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Rasterizes the world through `camera` in painter's order: receptacles,
/// objects, then the arm marker. Pixels are sampled at their centers.
pub fn render(world: &WorldState, camera: &CameraConfig) -> Raster {
    let n = camera.resolution;
    let center = match camera.kind {
        CameraKind::Global => camera.center,
        CameraKind::Wrist => world.arm.xy(),
    };
    let mut raster = Raster::filled(n, BACKGROUND);
    for row in 0..n {
        let wy = center[1] + (0.5 - (row as f64 + 0.5) / n as f64) / camera.zoom;
        for col in 0..n {
            let wx = center[0] + ((col as f64 + 0.5) / n as f64 - 0.5) / camera.zoom;
            if let Some(c) = shade(world, wx, wy) {
                raster.set(row, col, PALETTE[c]);
            }
        }
    }
    raster
}

fn shade(world: &WorldState, wx: f64, wy: f64) -> Option<usize> {
    let mut color = None;
    for r in &world.receptacles {
        let d = (wx - r.position[0]).hypot(wy - r.position[1]);
        if d <= r.radius && d >= r.radius - RING_WIDTH {
            color = Some(r.color_index as usize);
        }
    }
    for o in &world.objects {
        let (dx, dy) = (wx - o.position[0], wy - o.position[1]);
        let h = o.size / 2.0;
        let inside = match o.shape_index {
            0 => dx.abs() <= h && dy.abs() <= h,
            1 => dx * dx + dy * dy <= h * h,
            _ => dy >= -h && dy <= h && dx.abs() <= (h - dy) / 2.0,
        };
        if inside {
            color = Some(o.color_index as usize);
        }
    }
    if (wx - world.arm.x).hypot(wy - world.arm.y) <= ARM_MARKER_RADIUS {
        color = Some(ARM_COLOR);
    }
    color
}
