//! Python bindings. Arrays cross the boundary as nested lists: videos are
//! `[frame][row][col][rgb]`, matrices are `[row][col]`.

use acttransfer::codec::{Codec, VideoTensor};
use acttransfer::fae::{self, BiasScheduleParams, Transition};
use acttransfer::metrics::{self, ToyEncoder};
use acttransfer::mmdit::{attention_with_bias, Segments};
use acttransfer::synth_data::{CorpusConfig, Tracklets};
use ndarray::{Array2, Array4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

pub type Video = Vec<Vec<Vec<Vec<f64>>>>;
pub type Matrix = Vec<Vec<f64>>;

fn py_err(e: acttransfer::Error) -> PyErr {
    match e {
        acttransfer::Error::Io { .. } | acttransfer::Error::Numeric { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(format!("{}: {other}", other.category())),
    }
}

pub fn video_from_nested(v: &Video) -> acttransfer::Result<VideoTensor> {
    let t = v.len();
    let h = v.first().map_or(0, |f| f.len());
    let w = v.first().and_then(|f| f.first()).map_or(0, |r| r.len());
    let mut flat = Vec::with_capacity(t * h * w * 3);
    for frame in v {
        for row in frame {
            for px in row {
                if row.len() != w || frame.len() != h || px.len() != 3 {
                    return Err(acttransfer::Error::Shape("ragged video list".into()));
                }
                flat.extend_from_slice(px);
            }
        }
    }
    let data = Array4::from_shape_vec((t, h, w, 3), flat).map_err(|e| acttransfer::Error::Shape(e.to_string()))?;
    VideoTensor::new(data)
}

pub fn video_to_nested(v: &VideoTensor) -> Video {
    v.data()
        .outer_iter()
        .map(|f| f.outer_iter().map(|r| r.outer_iter().map(|p| p.to_vec()).collect()).collect())
        .collect()
}

pub fn matrix_from_nested(m: &Matrix) -> acttransfer::Result<Array2<f64>> {
    let r = m.len();
    let c = m.first().map_or(0, |row| row.len());
    if m.iter().any(|row| row.len() != c) {
        return Err(acttransfer::Error::Shape("ragged matrix list".into()));
    }
    Array2::from_shape_vec((r, c), m.concat()).map_err(|e| acttransfer::Error::Shape(e.to_string()))
}

pub fn matrix_to_nested(m: &Array2<f64>) -> Matrix {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn schedule_params(alpha: f64, t_l: f64, t_h: f64, transition: &str) -> acttransfer::Result<BiasScheduleParams> {
    let transition: Transition = transition.parse()?;
    let p = BiasScheduleParams {
        alpha,
        t_l,
        t_h,
        transition,
        ..Default::default()
    };
    p.validate()?;
    Ok(p)
}

/// Bias weight at timestep `t`.
#[pyfunction]
#[pyo3(signature = (t, alpha=1.0, t_l=800.0, t_h=700.0, transition="cosine"))]
fn w_bias(t: f64, alpha: f64, t_l: f64, t_h: f64, transition: &str) -> PyResult<f64> {
    let p = schedule_params(alpha, t_l, t_h, transition).map_err(py_err)?;
    fae::w_bias(t, &p).map_err(py_err)
}

/// `(t, w)` pairs over every integer timestep of the horizon.
#[pyfunction]
#[pyo3(signature = (alpha=1.0, t_l=800.0, t_h=700.0, transition="cosine"))]
fn schedule_dump(alpha: f64, t_l: f64, t_h: f64, transition: &str) -> PyResult<Vec<(usize, f64)>> {
    let p = schedule_params(alpha, t_l, t_h, transition).map_err(py_err)?;
    fae::schedule_dump(&p).map_err(py_err)
}

/// Single-head attention over `[prompt | freq | video]` rows; returns `(out, probs)`.
#[pyfunction]
fn biased_attention(q: Matrix, k: Matrix, v: Matrix, prompt_len: usize, freq_len: usize, bias: f64) -> PyResult<(Matrix, Matrix)> {
    let (q, k, v) = (
        matrix_from_nested(&q).map_err(py_err)?,
        matrix_from_nested(&k).map_err(py_err)?,
        matrix_from_nested(&v).map_err(py_err)?,
    );
    let video = q.nrows().checked_sub(prompt_len + freq_len).ok_or_else(|| PyValueError::new_err("segments exceed sequence length"))?;
    let seg = Segments::new(prompt_len, freq_len, video);
    let res = attention_with_bias(q.view(), k.view(), v.view(), &seg, bias).map_err(py_err)?;
    Ok((matrix_to_nested(&res.out), matrix_to_nested(&res.probs)))
}

/// Encodes then decodes a video; the codec is lossless so this returns the input.
#[pyfunction]
#[pyo3(signature = (video, temporal_factor=2, spatial_factor=4))]
fn codec_round_trip(video: Video, temporal_factor: usize, spatial_factor: usize) -> PyResult<(Video, (usize, usize, usize, usize))> {
    let codec = Codec::new(temporal_factor, spatial_factor).map_err(py_err)?;
    let v = video_from_nested(&video).map_err(py_err)?;
    let l = codec.encode_video(&v).map_err(py_err)?;
    let back = codec.decode(&l).map_err(py_err)?;
    Ok((video_to_nested(&back), l.shape()))
}

/// Renders corpus item `index` of the default corpus; returns `(video, prompt, positions)`.
#[pyfunction]
fn corpus_item(seed: u64, index: usize) -> PyResult<(Video, String, Vec<[f64; 2]>)> {
    let cfg = CorpusConfig::default();
    let meta = cfg.sample_item(seed, index).map_err(py_err)?;
    let v = meta.render(cfg.height, cfg.width).map_err(py_err)?;
    Ok((video_to_nested(&v), meta.prompt, meta.tracklets.positions))
}

/// Per-frame centroid `(x, y)`, or `None` where nothing was found.
#[pyfunction]
fn track_centroids(video: Video) -> PyResult<Vec<Option<[f64; 2]>>> {
    let v = video_from_nested(&video).map_err(py_err)?;
    let tr = metrics::track_centroids(&v);
    Ok(tr.positions.iter().zip(&tr.valid).map(|(p, &ok)| ok.then_some(*p)).collect())
}

#[pyfunction]
fn motion_fidelity(reference: Vec<[f64; 2]>, generated: Vec<[f64; 2]>) -> PyResult<f64> {
    let tr = |p: Vec<[f64; 2]>| Tracklets { valid: vec![true; p.len()], positions: p };
    metrics::motion_fidelity(&tr(reference), &tr(generated)).map_err(py_err)
}

/// `(text_similarity, temporal_consistency, appearance_consistency)` under the toy encoder.
#[pyfunction]
fn video_scores(video: Video, prompt: &str) -> PyResult<(f64, f64, f64)> {
    let v = video_from_nested(&video).map_err(py_err)?;
    let enc = ToyEncoder::default();
    Ok((
        metrics::text_similarity(&v, prompt, &enc).map_err(py_err)?,
        metrics::temporal_consistency(&v, &enc).map_err(py_err)?,
        metrics::appearance_consistency(&v, &enc).map_err(py_err)?,
    ))
}

#[pymodule]
fn acttransfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(w_bias, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_dump, m)?)?;
    m.add_function(wrap_pyfunction!(biased_attention, m)?)?;
    m.add_function(wrap_pyfunction!(codec_round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_item, m)?)?;
    m.add_function(wrap_pyfunction!(track_centroids, m)?)?;
    m.add_function(wrap_pyfunction!(motion_fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(video_scores, m)?)?;
    Ok(())
}
