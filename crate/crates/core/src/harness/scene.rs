use super::{HarnessError, Result};
use crate::propagation::{Building, GridSpec, Scene};
use std::fmt;
use std::str::FromStr;

/// Built-in propagation environments. All share a 200 m x 200 m map on a
/// 4 m grid centred at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenePreset {
    /// 3 x 3 block city, rooftop-height transmitter at an intersection,
    /// 15 GHz.
    Urban15,
    /// The same city at 8 GHz.
    Urban8,
    /// Two parallel building rows along a street, transmitter at one end,
    /// 15 GHz.
    Canyon,
}

const BLOCK_CENTERS: [f64; 3] = [-60.0, 0.0, 60.0];
const BLOCK_HALF: f64 = 18.0;
const BLOCK_HEIGHTS: [f64; 9] = [22.0, 35.0, 15.0, 28.0, 40.0, 18.0, 12.0, 30.0, 25.0];

impl ScenePreset {
    pub const ALL: [ScenePreset; 3] = [ScenePreset::Urban15, ScenePreset::Urban8, ScenePreset::Canyon];

    pub fn name(&self) -> &'static str {
        match self {
            ScenePreset::Urban15 => "urban15",
            ScenePreset::Urban8 => "urban8",
            ScenePreset::Canyon => "canyon",
        }
    }

    pub fn id(&self) -> u32 {
        match self {
            ScenePreset::Urban15 => 0,
            ScenePreset::Urban8 => 1,
            ScenePreset::Canyon => 2,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    pub fn carrier_hz(&self) -> f64 {
        match self {
            ScenePreset::Urban8 => 8e9,
            _ => 15e9,
        }
    }

    pub fn bandwidth_hz(&self) -> f64 {
        400e6
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            origin: [-100.0, -100.0],
            spacing: 4.0,
            rows: 51,
            cols: 51,
        }
    }

    pub fn scene(&self) -> Result<Scene> {
        let (buildings, tx) = match self {
            ScenePreset::Urban15 | ScenePreset::Urban8 => {
                let mut b = Vec::new();
                for (i, &cy) in BLOCK_CENTERS.iter().enumerate() {
                    for (j, &cx) in BLOCK_CENTERS.iter().enumerate() {
                        b.push(Building::footprint(
                            [cx - BLOCK_HALF, cx + BLOCK_HALF],
                            [cy - BLOCK_HALF, cy + BLOCK_HALF],
                            BLOCK_HEIGHTS[3 * i + j],
                        )?);
                    }
                }
                (b, [-30.0, -30.0, 20.0])
            }
            ScenePreset::Canyon => {
                let mut b = Vec::new();
                for k in 0..4 {
                    let x0 = -90.0 + 50.0 * k as f64;
                    let h = [24.0, 30.0, 20.0, 27.0][k];
                    b.push(Building::footprint([x0, x0 + 40.0], [12.0, 30.0], h)?);
                    b.push(Building::footprint([x0 + 5.0, x0 + 45.0], [-30.0, -12.0], h + 3.0)?);
                }
                (b, [-97.0, 0.0, 10.0])
            }
        };
        Ok(Scene::new(buildings, tx, self.carrier_hz())?)
    }
}

impl fmt::Display for ScenePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenePreset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown scene `{s}`")))
    }
}
