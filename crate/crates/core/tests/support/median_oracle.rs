// Brute-force masked median used to check the compositor.

use orsense_core::compositing::{CloudMask, Scene, SceneMeta, SceneStack};
use orsense_core::raster::{GeoTransform, Raster, SampleType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomStack {
    pub stack: SceneStack,
    pub masks: Vec<CloudMask>,
    pub bands: usize,
}

/// Small stack with integer-valued samples (so ties and duplicates occur) and random masks.
pub fn random_stack(seed: u64) -> RandomStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=7);
    let h = rng.random_range(1..=9);
    let w = rng.random_range(1..=9);
    let bands = rng.random_range(1..=4);
    let names: Vec<String> = (0..bands).map(|b| format!("B{b:02}")).collect();
    let gt = GeoTransform::north_up(-50.0, -10.0, 1e-4);
    let mask_rate: f64 = rng.random_range(0.0..0.9);
    let mut scenes = Vec::new();
    let mut masks = Vec::new();
    for s in 0..n {
        let data: Vec<f32> = (0..h * w * bands).map(|_| rng.random_range(0..50) as f32).collect();
        scenes.push(Scene {
            name: format!("s{s}"),
            raster: Raster::new(h, w, names.clone(), SampleType::U16, gt, data).unwrap(),
            meta: SceneMeta {
                sensing_date: "2018-06-01".into(),
                cloud_pct: 0.0,
            },
        });
        masks.push(CloudMask {
            height: h,
            width: w,
            cloudy: (0..h * w).map(|_| rng.random_bool(mask_rate)).collect(),
        });
    }
    RandomStack {
        stack: SceneStack::new(scenes).unwrap(),
        masks,
        bands,
    }
}

/// Sort-and-pick median per pixel and band; `None` where nothing is valid.
pub fn brute_force(rs: &RandomStack) -> Vec<Option<f64>> {
    let scenes = rs.stack.scenes();
    let (h, w) = (scenes[0].raster.height(), scenes[0].raster.width());
    let mut out = Vec::new();
    for px in 0..h * w {
        for b in 0..rs.bands {
            let mut v: Vec<f64> = scenes
                .iter()
                .zip(&rs.masks)
                .filter(|(_, m)| !m.cloudy[px])
                .map(|(s, _)| s.raster.data()[px * rs.bands + b] as f64)
                .collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.push(match v.len() {
                0 => None,
                n if n % 2 == 1 => Some(v[n / 2]),
                n => Some((v[n / 2 - 1] + v[n / 2]) / 2.0),
            });
        }
    }
    out
}
