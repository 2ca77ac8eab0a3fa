//! Python module `orsense`: networks, rasters, compositing, synthetic data,
//! training and wide-area detection. Images cross the boundary as flat
//! row-major `[row][col][band]` lists of floats.

use std::path::PathBuf;

use orsense_core::compositing::{composite_stack, parse_date, SceneStack};
use orsense_core::dataset::{load_points as core_load_points, NormStats, PatchSet};
use orsense_core::models::{build_discovery_fcn, build_impact_cnn, output_geometry};
use orsense_core::nn::{self, NetworkSpec, WeightSet};
use orsense_core::raster::{read_geotiff, write_geotiff, Raster as CoreRaster};
use orsense_core::synthetic::{generate_dataset as core_generate_dataset, generate_scene, mosaic_scene_spec, DatasetSpec, MosaicSpec};
use orsense_core::training::{cross_validate, train_all, Task, TrainConfig};
use orsense_core::widearea::{self, DetectOptions, DetectionSet as CoreSet, Format};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value;

create_exception!(orsense, OrsenseError, PyException);

fn err(e: orsense_core::Error) -> PyErr {
    OrsenseError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_bound_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            Ok(PyList::new(py, items)?.into_any())
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            Ok(d.into_any())
        }
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(config: Option<&str>) -> PyResult<T> {
    match config {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| OrsenseError::new_err(format!("json: {e}"))),
    }
}

/// A network architecture with its weights.
#[pyclass(module = "orsense")]
struct Network {
    spec: NetworkSpec,
    weights: WeightSet,
}

#[pymethods]
impl Network {
    /// The discovery FCN, Glorot-initialized from `seed`.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn discovery(seed: u64) -> PyResult<Network> {
        Network::init(build_discovery_fcn(), seed)
    }

    /// The 21-px impact classifier, Glorot-initialized from `seed`.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn impact(seed: u64) -> PyResult<Network> {
        Network::init(build_impact_cnn(), seed)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Network> {
        let (spec, weights) = nn::load_weights(&path).map_err(err)?;
        Ok(Network { spec, weights })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nn::save_weights(&self.spec, &self.weights, &path).map_err(err)
    }

    fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Parameter count of each layer that has parameters.
    fn layer_param_counts(&self) -> Vec<usize> {
        self.weights
            .layers
            .iter()
            .map(|l| l.iter().map(|t| t.len()).sum::<usize>())
            .filter(|&n| n > 0)
            .collect()
    }

    fn output_shape(&self, height: usize, width: usize) -> PyResult<Vec<usize>> {
        Ok(self.spec.output_shape(height, width).map_err(err)?.dims())
    }

    /// Forward pass over one `height×width×12` image, returning the flat
    /// output and its shape.
    fn predict(&self, py: Python<'_>, image: Vec<f32>, height: usize, width: usize) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let (out, shape) = py
            .detach(|| nn::predict(&self.spec, &self.weights, &image, height, width))
            .map_err(err)?;
        Ok((out, shape.dims()))
    }

    fn digest(&self) -> PyResult<String> {
        nn::weights_digest(&self.spec, &self.weights).map_err(err)
    }
}

impl Network {
    fn init(spec: NetworkSpec, seed: u64) -> PyResult<Network> {
        let weights = orsense_core::training::initial_weights(&spec, seed).map_err(err)?;
        Ok(Network { spec, weights })
    }
}

/// Grid geometry of the discovery FCN on a `height×width` input.
#[pyfunction]
fn discovery_geometry<'py>(py: Python<'py>, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let g = output_geometry(&build_discovery_fcn(), height, width).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("grid_rows", g.grid_rows)?;
    d.set_item("grid_cols", g.grid_cols)?;
    d.set_item("stride", g.stride)?;
    d.set_item("offset", g.offset)?;
    d.set_item("receptive_field", g.receptive_field)?;
    Ok(d)
}

#[pyclass(module = "orsense")]
struct Raster {
    inner: CoreRaster,
}

#[pymethods]
impl Raster {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Raster> {
        Ok(Raster {
            inner: read_geotiff(&path).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_geotiff(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn bands(&self) -> Vec<String> {
        self.inner.band_names().to_vec()
    }

    #[getter]
    fn crs(&self) -> String {
        self.inner.crs().to_string()
    }

    /// GDAL-ordered affine coefficients.
    #[getter]
    fn geotransform(&self) -> [f64; 6] {
        self.inner.geo().to_gdal()
    }

    /// Geographic coordinates of a pixel center.
    fn pixel_to_geo(&self, row: f64, col: f64) -> (f64, f64) {
        self.inner.pixel_to_geo(row, col)
    }

    /// Continuous `(row, col)` whose integer values are pixel centers.
    fn geo_to_pixel(&self, lon: f64, lat: f64) -> (f64, f64) {
        let p = self.inner.geo_to_pixel(lon, lat);
        (p.row, p.col)
    }

    fn band(&self, name: &str) -> PyResult<Vec<f32>> {
        let i = self
            .inner
            .band_index(name)
            .ok_or_else(|| OrsenseError::new_err(format!("input: no band {name}")))?;
        Ok(self.inner.band(i))
    }

    /// All samples, `[row][col][band]`.
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }
}

/// Median composite of the scenes in `scenes_dir` sensed in `[date_from, date_to)`.
#[pyfunction]
#[pyo3(signature = (scenes_dir, date_from = "2018-01-01", date_to = "2020-01-01", max_cloud = 20.0))]
fn composite(py: Python<'_>, scenes_dir: PathBuf, date_from: &str, date_to: &str, max_cloud: f64) -> PyResult<Raster> {
    let (from, to) = (parse_date(date_from).map_err(err)?, parse_date(date_to).map_err(err)?);
    let inner = py
        .detach(|| SceneStack::load_dir(&scenes_dir).and_then(|s| composite_stack(&s, from, to, max_cloud)))
        .map_err(err)?;
    Ok(Raster { inner })
}

/// Synthetic mosaic from a JSON mosaic spec; returns the raster and its
/// ground-truth points.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn synth_scene<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<(Raster, Bound<'py, PyAny>)> {
    let spec: MosaicSpec = parse_json(config)?;
    let (inner, truth) = py
        .detach(|| mosaic_scene_spec(&spec).and_then(|s| generate_scene(&s)))
        .map_err(err)?;
    let truth = serde_json::to_value(points_json(&truth)).expect("points serialize");
    Ok((Raster { inner }, to_py(py, &truth)?))
}

fn points_json(points: &[orsense_core::dataset::PointRecord]) -> Vec<Value> {
    points
        .iter()
        .map(|p| {
            serde_json::json!({
                "id": p.id, "lon": p.lon, "lat": p.lat,
                "class": p.class.as_str(), "ore": p.ore.as_str(), "source": p.source,
            })
        })
        .collect()
}

/// Write discovery and impact patch sets under `out`.
#[pyfunction]
#[pyo3(signature = (out, config = None))]
fn synth_dataset<'py>(py: Python<'py>, out: PathBuf, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let spec: DatasetSpec = parse_json(config)?;
    let s = py.detach(|| core_generate_dataset(&spec, &out)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("discovery", s.discovery.records.len())?;
    d.set_item("impact", s.impact.records.len())?;
    d.set_item("points", s.points.len())?;
    Ok(d)
}

/// Records and row errors of a points file.
#[pyfunction]
fn load_points<'py>(py: Python<'py>, path: PathBuf) -> PyResult<(Bound<'py, PyAny>, Vec<(usize, String)>)> {
    let load = core_load_points(&path).map_err(err)?;
    let recs = to_py(py, &Value::Array(points_json(&load.records)))?;
    Ok((recs, load.errors.into_iter().map(|e| (e.row, e.message)).collect()))
}

/// Train on a patch directory. With `folds >= 2` this cross-validates and
/// returns the best fold's network; the metrics dict follows the CLI's
/// `metrics.json`.
#[pyfunction]
#[pyo3(signature = (task, patches, epochs = 30, folds = 10, seed = 0))]
fn train<'py>(
    py: Python<'py>,
    task: &str,
    patches: PathBuf,
    epochs: usize,
    folds: usize,
    seed: u64,
) -> PyResult<(Network, Bound<'py, PyAny>, Bound<'py, PyDict>)> {
    let task: Task = task.parse().map_err(OrsenseError::new_err)?;
    let spec = match task {
        Task::Discovery => build_discovery_fcn(),
        Task::Impact => build_impact_cnn(),
    };
    let cfg = TrainConfig {
        epochs,
        k: folds,
        seed,
        ..Default::default()
    };
    let (weights, stats, metrics) = py
        .detach(|| -> orsense_core::Result<(WeightSet, NormStats, Value)> {
            let set = PatchSet::load(&patches)?;
            if folds >= 2 {
                let r = cross_validate(&spec, &set, task, &cfg)?;
                let b = r.best_fold();
                Ok((b.outcome.weights.clone(), b.outcome.stats.clone(), r.metrics_json()))
            } else {
                let o = train_all(&spec, &set, task, &cfg)?;
                let last = o.history.epochs.last().expect("one epoch");
                let m = serde_json::json!({"task": task, "k": 1, "train_accuracy": last.train_acc});
                Ok((o.weights, o.stats, m))
            }
        })
        .map_err(err)?;
    let s = PyDict::new(py);
    s.set_item("mean", stats.mean)?;
    s.set_item("std", stats.std)?;
    Ok((Network { spec, weights }, to_py(py, &metrics)?, s))
}

fn stats_from(d: &Bound<'_, PyDict>) -> PyResult<NormStats> {
    let get = |k: &str| -> PyResult<Vec<f64>> {
        d.get_item(k)?
            .ok_or_else(|| OrsenseError::new_err(format!("input: stats lack {k}")))?
            .extract()
    };
    Ok(NormStats {
        mean: get("mean")?,
        std: get("std")?,
    })
}

#[pyclass(module = "orsense")]
struct Detections {
    inner: CoreSet,
}

#[pymethods]
impl Detections {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Detections> {
        Ok(Detections {
            inner: CoreSet::load(&path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.detections.len()
    }

    /// Write csv, kml or geojson plus the provenance sidecar.
    fn export(&self, format: &str, path: PathBuf) -> PyResult<()> {
        let f: Format = format.parse().map_err(OrsenseError::new_err)?;
        self.inner.export(f, &path).map_err(err)
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.to_csv().map_err(err)
    }

    fn to_kml(&self) -> String {
        self.inner.to_kml()
    }

    /// Detections as a list of dicts.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let v = serde_json::to_value(&self.inner.detections).expect("detections serialize");
        to_py(py, &v)
    }

    fn provenance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let v = serde_json::to_value(&self.inner.provenance).expect("provenance serializes");
        to_py(py, &v)
    }
}

/// Tiled discovery over a mosaic, clustered.
#[pyfunction]
#[pyo3(signature = (mosaic, network, stats, threshold = 0.5, max_tile = 4608, overlap = 216))]
fn detect(
    py: Python<'_>,
    mosaic: &Raster,
    network: &Network,
    stats: &Bound<'_, PyDict>,
    threshold: f64,
    max_tile: usize,
    overlap: usize,
) -> PyResult<Detections> {
    let stats = stats_from(stats)?;
    let opts = DetectOptions {
        threshold,
        max_tile,
        overlap,
    };
    let inner = py
        .detach(|| {
            let m = mosaic.inner.model_bands()?;
            let mut s = widearea::detect(&m, &network.spec, &network.weights, &stats, &opts)?;
            widearea::cluster(&mut s, widearea::stride_meters(&m));
            Ok(s)
        })
        .map_err(err)?;
    Ok(Detections { inner })
}

/// Impact filtering: no-ore detections are dropped, the rest get a class.
#[pyfunction]
fn classify_impact(py: Python<'_>, detections: &Detections, mosaic: &Raster, network: &Network, stats: &Bound<'_, PyDict>) -> PyResult<Detections> {
    let stats = stats_from(stats)?;
    let inner = py
        .detach(|| {
            let m = mosaic.inner.model_bands()?;
            let mut s = widearea::impact_filter(&detections.inner, &m, &network.spec, &network.weights, &stats)?;
            widearea::cluster(&mut s, widearea::stride_meters(&m));
            Ok(s)
        })
        .map_err(err)?;
    Ok(Detections { inner })
}

/// Tile windows `(row0, col0, height, width)` for a mosaic.
#[pyfunction]
#[pyo3(signature = (height, width, max_side = 4608, overlap = 216))]
fn plan_tiles(height: usize, width: usize, max_side: usize, overlap: usize) -> PyResult<Vec<(usize, usize, usize, usize)>> {
    let p = widearea::plan_tiles(height, width, max_side, overlap).map_err(err)?;
    Ok(p.tiles.iter().map(|t| (t.row0, t.col0, t.height, t.width)).collect())
}

#[pymodule]
fn orsense(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OrsenseError", m.py().get_type::<OrsenseError>())?;
    m.add_class::<Network>()?;
    m.add_class::<Raster>()?;
    m.add_class::<Detections>()?;
    m.add_function(wrap_pyfunction!(discovery_geometry, m)?)?;
    m.add_function(wrap_pyfunction!(composite, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_points, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(classify_impact, m)?)?;
    m.add_function(wrap_pyfunction!(plan_tiles, m)?)?;
    Ok(())
}
