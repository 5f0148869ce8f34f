//! Python bindings for the pipeline primitives: box math, grid planning,
//! NMS / weighted boxes fusion, TTA box inversion, evaluation and Macenko
//! stain normalization. Thin wrappers; all logic lives in mitodet-core.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use mitodet_core::eval;
use mitodet_core::fusion;
use mitodet_core::geom::{Annotation, Detection, Label, PixelBox};
use mitodet_core::stain;
use mitodet_core::tiler;

type BoxTuple = (f64, f64, f64, f64);
type DetTuple = (f64, f64, f64, f64, f64);
type EvalTuple = (usize, usize, usize, f64, f64, f64, Option<f64>);

fn to_pixel_box(b: BoxTuple) -> PyResult<PixelBox> {
    PixelBox::new(b.0, b.1, b.2, b.3).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_detection(d: DetTuple) -> PyResult<Detection> {
    let bbox = to_pixel_box((d.0, d.1, d.2, d.3))?;
    Detection::new(bbox, d.4, Label::MitoticFigure)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_detection(d: &Detection) -> DetTuple {
    let b = d.bbox();
    (b.x_min(), b.y_min(), b.x_max(), b.y_max(), d.score())
}

fn parse_variant(name: &str) -> PyResult<fusion::TtaVariant> {
    match name.to_ascii_lowercase().as_str() {
        "identity" => Ok(fusion::TtaVariant::Identity),
        "hflip" => Ok(fusion::TtaVariant::HFlip),
        "vflip" => Ok(fusion::TtaVariant::VFlip),
        "hvflip" => Ok(fusion::TtaVariant::HVFlip),
        other => Err(PyValueError::new_err(format!(
            "unknown TTA variant {other:?}"
        ))),
    }
}

fn rgb_image(rgb: &[u8], width: u32, height: u32) -> PyResult<image::RgbImage> {
    let expected = width as usize * height as usize * 3;
    if rgb.len() != expected {
        return Err(PyValueError::new_err(format!(
            "expected {expected} bytes for {width}x{height} RGB, got {}",
            rgb.len()
        )));
    }
    image::RgbImage::from_raw(width, height, rgb.to_vec())
        .ok_or_else(|| PyValueError::new_err("buffer does not form an image"))
}

/// Intersection-over-union of two `(x_min, y_min, x_max, y_max)` boxes.
#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(to_pixel_box(a)?.iou(&to_pixel_box(b)?))
}

/// One planned tile of an ROI grid.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Tile {
    #[pyo3(get)]
    row: usize,
    #[pyo3(get)]
    col: usize,
    #[pyo3(get)]
    x: u32,
    #[pyo3(get)]
    y: u32,
    #[pyo3(get)]
    size: u32,
    #[pyo3(get)]
    clamped: bool,
    #[pyo3(get)]
    padded: bool,
}

#[pymethods]
impl Tile {
    fn __repr__(&self) -> String {
        format!(
            "Tile(row={}, col={}, x={}, y={}, size={}, clamped={}, padded={})",
            self.row, self.col, self.x, self.y, self.size, self.clamped, self.padded
        )
    }
}

/// Plan the overlapping tile grid for a `width x height` ROI.
#[pyfunction]
#[pyo3(signature = (width, height, tile_size=640, stride=480))]
fn plan_grid(width: u32, height: u32, tile_size: u32, stride: u32) -> PyResult<Vec<Tile>> {
    let roi = mitodet_core::geom::RoiSpec::new("roi", width, height)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = tiler::TileGridConfig::new(tile_size, stride)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let grid = tiler::plan_grid(&roi, &cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(grid
        .into_iter()
        .map(|t| Tile {
            row: t.index.0,
            col: t.index.1,
            x: t.origin.0,
            y: t.origin.1,
            size: t.size,
            clamped: t.clamped,
            padded: t.padded,
        })
        .collect())
}

/// Greedy NMS over `(x_min, y_min, x_max, y_max, score)` detections.
#[pyfunction]
#[pyo3(signature = (dets, iou_thresh=0.7))]
fn nms(dets: Vec<DetTuple>, iou_thresh: f64) -> PyResult<Vec<DetTuple>> {
    let dets: Vec<Detection> = dets.into_iter().map(to_detection).collect::<PyResult<_>>()?;
    Ok(fusion::nms(&dets, iou_thresh).iter().map(from_detection).collect())
}

/// Weighted boxes fusion; `score_mode` is "mean" or "rescale_by_support".
#[pyfunction]
#[pyo3(signature = (dets, iou_thresh=0.55, score_mode="mean", support_t=4))]
fn wbf(
    dets: Vec<DetTuple>,
    iou_thresh: f64,
    score_mode: &str,
    support_t: usize,
) -> PyResult<Vec<DetTuple>> {
    let mode = match score_mode {
        "mean" => fusion::ScoreMode::Mean,
        "rescale_by_support" => fusion::ScoreMode::RescaleBySupport,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown score mode {other:?}"
            )))
        }
    };
    let dets: Vec<Detection> = dets.into_iter().map(to_detection).collect::<PyResult<_>>()?;
    Ok(fusion::wbf(&dets, iou_thresh, mode, support_t)
        .iter()
        .map(from_detection)
        .collect())
}

/// Map detections from a TTA variant's frame back to the canonical frame.
#[pyfunction]
fn invert_boxes(dets: Vec<DetTuple>, variant: &str, tile_size: f64) -> PyResult<Vec<DetTuple>> {
    let variant = parse_variant(variant)?;
    let dets: Vec<Detection> = dets.into_iter().map(to_detection).collect::<PyResult<_>>()?;
    Ok(fusion::invert_boxes(&dets, variant, tile_size)
        .iter()
        .map(from_detection)
        .collect())
}

/// Precision, recall and F1 from raw counts.
#[pyfunction]
fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    eval::prf(tp, fp, fn_)
}

/// Distance-matched evaluation of one image.
///
/// `preds` are `(x_min, y_min, x_max, y_max, score)` boxes, `gts` are
/// `(x, y)` centers; returns `(tp, fp, fn, precision, recall, f1, ap)`.
#[pyfunction]
#[pyo3(signature = (preds, gts, dist_thresh_px=30.0))]
fn evaluate(
    preds: Vec<DetTuple>,
    gts: Vec<(f64, f64)>,
    dist_thresh_px: f64,
) -> PyResult<EvalTuple> {
    let preds: Vec<Detection> = preds.into_iter().map(to_detection).collect::<PyResult<_>>()?;
    let gts: Vec<Annotation> = gts
        .into_iter()
        .map(|(x, y)| Annotation::new(x, y, Label::MitoticFigure))
        .collect();
    let image = eval::evaluate_image("image", &preds, &gts, dist_thresh_px);
    Ok((
        image.tp,
        image.fp,
        image.false_negatives,
        image.precision,
        image.recall,
        image.f1,
        image.ap,
    ))
}

/// A fitted stain basis: H and E unit OD vectors plus concentration ceilings.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct StainProfile {
    inner: stain::StainProfile,
}

#[pymethods]
impl StainProfile {
    /// Row-major 3x2 stain matrix (columns H, E), 6 numbers.
    #[getter]
    fn stain_matrix(&self) -> Vec<f64> {
        let m = self.inner.stain_matrix();
        (0..3).flat_map(|r| [m[(r, 0)], m[(r, 1)]]).collect()
    }

    #[getter]
    fn max_conc(&self) -> Vec<f64> {
        self.inner.max_conc().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "StainProfile(stain_matrix={:?}, max_conc={:?})",
            self.stain_matrix(),
            self.inner.max_conc()
        )
    }
}

/// Fit a Macenko stain profile on an RGB image given as raw bytes.
#[pyfunction]
fn fit_stain_profile(rgb: &[u8], width: u32, height: u32) -> PyResult<StainProfile> {
    let image = rgb_image(rgb, width, height)?;
    let profile = stain::fit_stain_profile(&image, &stain::MacenkoParams::default())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(StainProfile { inner: profile })
}

/// Normalize an RGB image (raw bytes) onto a fitted target profile.
#[pyfunction]
fn normalize_image<'py>(
    py: Python<'py>,
    rgb: &[u8],
    width: u32,
    height: u32,
    target: &StainProfile,
) -> PyResult<Bound<'py, PyBytes>> {
    let image = rgb_image(rgb, width, height)?;
    let out = stain::normalize(&image, &target.inner)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyBytes::new(py, out.as_raw()))
}

#[pymodule]
fn mitodet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Tile>()?;
    m.add_class::<StainProfile>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(plan_grid, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(wbf, m)?)?;
    m.add_function(wrap_pyfunction!(invert_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(prf, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_stain_profile, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_image, m)?)?;
    Ok(())
}
