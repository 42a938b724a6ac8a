//! Vertex-space evaluation metrics and adjacent-frame heatmap statistics.
//!
//! All distances are Euclidean in millimetres; standard deviations are
//! population standard deviations.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flame::{BlendshapeModel, NeutralShape, RegionMask, RegionMasks, VertexSequence, FRAME_DIM};
use crate::motion::MotionSequence;

type Seq = VertexSequence<f64>;

fn dist(a: &Seq, b: &Seq, t: usize, v: usize) -> f64 {
    let (p, q) = (a.at(t, v), b.at(t, v));
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn check_pair(gt: &Seq, pred: &Seq) -> Result<()> {
    if !gt.same_shape(pred) {
        return Err(shape_err!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.frames,
            pred.vertices,
            gt.frames,
            gt.vertices
        ));
    }
    if gt.frames == 0 || gt.vertices == 0 {
        return Err(Error::Input("empty vertex sequence".into()));
    }
    Ok(())
}

fn check_mask(mask: &RegionMask, vertices: usize) -> Result<()> {
    mask.validate(vertices)
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean vertex error over every frame and vertex.
pub fn mve(gt: &Seq, pred: &Seq) -> Result<f64> {
    check_pair(gt, pred)?;
    let mut s = 0.0;
    for t in 0..gt.frames {
        for v in 0..gt.vertices {
            s += dist(gt, pred, t, v);
        }
    }
    Ok(s / (gt.frames * gt.vertices) as f64)
}

/// Lip vertex error: mean over frames of the largest lip-vertex error.
pub fn lve(gt: &Seq, pred: &Seq, lip: &RegionMask) -> Result<f64> {
    check_pair(gt, pred)?;
    check_mask(lip, gt.vertices)?;
    let mut s = 0.0;
    for t in 0..gt.frames {
        s += lip
            .vertex_indices
            .iter()
            .map(|&v| dist(gt, pred, t, v))
            .fold(0.0, f64::max);
    }
    Ok(s / gt.frames as f64)
}

/// Per-vertex temporal std of the distance to the template.
fn dynamics(seq: &Seq, v: usize, template: &[f64]) -> f64 {
    let tv = [template[3 * v], template[3 * v + 1], template[3 * v + 2]];
    let d: Vec<f64> = (0..seq.frames)
        .map(|t| {
            let p = seq.at(t, v);
            ((p[0] - tv[0]).powi(2) + (p[1] - tv[1]).powi(2) + (p[2] - tv[2]).powi(2)).sqrt()
        })
        .collect();
    population_std(&d)
}

/// Signed face dynamics deviation over the upper face: mean over region
/// vertices of `std_t(pred) − std_t(gt)` of the template distance.
pub fn fdd(gt: &Seq, pred: &Seq, upper: &RegionMask, template: &[f64]) -> Result<f64> {
    check_pair(gt, pred)?;
    check_mask(upper, gt.vertices)?;
    if gt.frames < 2 {
        return Err(Error::Input("face dynamics deviation needs at least 2 frames".into()));
    }
    if template.len() != gt.vertices * 3 {
        return Err(shape_err!("template has {} values for {} vertices", template.len(), gt.vertices));
    }
    let s: f64 = upper
        .vertex_indices
        .iter()
        .map(|&v| dynamics(pred, v, template) - dynamics(gt, v, template))
        .sum();
    Ok(s / upper.vertex_indices.len() as f64)
}

fn lves(gt: &Seq, preds: &[Seq], lip: &RegionMask) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    preds.iter().map(|p| lve(gt, p, lip)).collect()
}

/// Mean lip error over samples.
pub fn mee(gt: &Seq, preds: &[Seq], lip: &RegionMask) -> Result<f64> {
    let l = lves(gt, preds, lip)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Best-sample lip error.
pub fn ce(gt: &Seq, preds: &[Seq], lip: &RegionMask) -> Result<f64> {
    Ok(lves(gt, preds, lip)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Mean over sample pairs of their mean vertex distance; 0 for one sample.
pub fn diversity(preds: &[Seq]) -> Result<f64> {
    let n = preds.len();
    if n == 0 {
        return Err(Error::Input("no samples".into()));
    }
    if n == 1 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += mve(&preds[i], &preds[j])?;
        }
    }
    Ok(2.0 * s / (n * (n - 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexStat {
    pub vertex: usize,
    pub mean_mm: f64,
    pub std_mm: f64,
}

/// Per-vertex mean and std of the displacement between adjacent frames.
pub fn heatmap_stats(seq: &Seq) -> Result<Vec<VertexStat>> {
    if seq.frames < 2 {
        return Err(Error::Input("heatmap needs at least 2 frames".into()));
    }
    Ok((0..seq.vertices)
        .map(|v| {
            let d: Vec<f64> = (0..seq.frames - 1)
                .map(|t| {
                    let (a, b) = (seq.at(t, v), seq.at(t + 1, v));
                    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
                })
                .collect();
            VertexStat {
                vertex: v,
                mean_mm: d.iter().sum::<f64>() / d.len() as f64,
                std_mm: population_std(&d),
            }
        })
        .collect())
}

pub fn heatmap_csv(stats: &[VertexStat]) -> String {
    let mut out = String::from("vertex_index,mean_mm,std_mm\n");
    for s in stats {
        out.push_str(&format!("{},{},{}\n", s.vertex, s.mean_mm, s.std_mm));
    }
    out
}

/// Ground truth and `n ≥ 1` predictions of one utterance. The deterministic
/// metrics use the first prediction.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub key: String,
    pub gt: Seq,
    pub preds: Vec<Seq>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemMetrics {
    pub key: String,
    pub mve: f64,
    pub lve: f64,
    /// Signed.
    pub fdd: f64,
    pub mee: f64,
    pub ce: f64,
    pub diversity: f64,
}

/// Unweighted means over items. The summary `fdd` is the mean of the
/// absolute per-item values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub mve: f64,
    pub lve: f64,
    pub fdd: f64,
    pub mee: f64,
    pub ce: f64,
    pub diversity: f64,
    pub per_item: Vec<ItemMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn evaluate_item(item: &EvalItem, lip: &RegionMask, upper: &RegionMask, template: &[f64]) -> Result<ItemMetrics> {
    let first = item
        .preds
        .first()
        .ok_or_else(|| Error::Input(format!("item {} has no predictions", item.key)))?;
    item_metrics(&item.key, &item.gt, first, &item.preds, lip, upper, template)
}

/// Metrics with the deterministic ones taken from `point` and the sample
/// ones from `samples`.
pub fn item_metrics(
    key: &str,
    gt: &Seq,
    point: &Seq,
    samples: &[Seq],
    lip: &RegionMask,
    upper: &RegionMask,
    template: &[f64],
) -> Result<ItemMetrics> {
    Ok(ItemMetrics {
        key: key.to_string(),
        mve: mve(gt, point)?,
        lve: lve(gt, point, lip)?,
        fdd: fdd(gt, point, upper, template)?,
        mee: mee(gt, samples, lip)?,
        ce: ce(gt, samples, lip)?,
        diversity: diversity(samples)?,
    })
}

pub fn aggregate(per_item: Vec<ItemMetrics>) -> Result<MetricReport> {
    if per_item.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let n = per_item.len() as f64;
    let mean = |f: fn(&ItemMetrics) -> f64| per_item.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        mve: mean(|m| m.mve),
        lve: mean(|m| m.lve),
        fdd: mean(|m| m.fdd.abs()),
        mee: mean(|m| m.mee),
        ce: mean(|m| m.ce),
        diversity: mean(|m| m.diversity),
        per_item,
    })
}

pub fn evaluate_corpus(items: &[EvalItem], lip: &RegionMask, upper: &RegionMask, template: &[f64]) -> Result<MetricReport> {
    let per_item = items
        .iter()
        .map(|it| evaluate_item(it, lip, upper, template))
        .collect::<Result<Vec<_>>>()?;
    aggregate(per_item)
}

/// Decodes motion through one blendshape model and scores it with that
/// model's region masks. The reference face for dynamics is the subject's
/// neutral face.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub model: BlendshapeModel<f64>,
    pub masks: RegionMasks,
}

impl Evaluator {
    pub fn new(model: &BlendshapeModel<f32>, masks: RegionMasks) -> Result<Self> {
        masks.validate(model.vertices())?;
        Ok(Self {
            model: model.cast(),
            masks,
        })
    }

    pub fn vertices(&self, shape: &NeutralShape, m: &MotionSequence) -> Result<Seq> {
        self.model.decode_frames(shape, &m.data)
    }

    pub fn neutral(&self, shape: &NeutralShape) -> Result<Vec<f64>> {
        self.model.decode_frame(shape, &[0.0; FRAME_DIM])
    }

    pub fn item(
        &self,
        key: &str,
        shape: &NeutralShape,
        gt: &MotionSequence,
        point: &MotionSequence,
        samples: &[MotionSequence],
    ) -> Result<ItemMetrics> {
        for m in std::iter::once(point).chain(samples) {
            if m.fps != gt.fps || m.frames != gt.frames {
                return Err(shape_err!(
                    "{key}: prediction is {} frames at {} fps, ground truth {} at {}",
                    m.frames,
                    m.fps,
                    gt.frames,
                    gt.fps
                ));
            }
        }
        let v = |m: &MotionSequence| self.vertices(shape, m);
        let samples = samples.iter().map(v).collect::<Result<Vec<_>>>()?;
        item_metrics(
            key,
            &v(gt)?,
            &v(point)?,
            &samples,
            &self.masks.lip,
            &self.masks.upper_face,
            &self.neutral(shape)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, vertices: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Seq {
        let mut data = Vec::new();
        for t in 0..frames {
            for v in 0..vertices {
                data.extend(f(t, v));
            }
        }
        VertexSequence::new(frames, vertices, data).unwrap()
    }

    fn mask(name: &str, idx: Vec<usize>) -> RegionMask {
        RegionMask::new(name, idx).unwrap()
    }

    #[test]
    fn mve_examples() {
        let z = seq(1, 1, |_, _| [0.0; 3]);
        assert_eq!(mve(&z, &z).unwrap(), 0.0);
        assert_eq!(mve(&z, &seq(1, 1, |_, _| [3.0, 4.0, 0.0])).unwrap(), 5.0);
        let a = seq(1, 2, |_, _| [0.0; 3]);
        let b = seq(1, 2, |_, v| [if v == 0 { 1.0 } else { 3.0 }, 0.0, 0.0]);
        assert_eq!(mve(&a, &b).unwrap(), 2.0);
        assert!(mve(&a, &z).is_err());
    }

    #[test]
    fn lve_examples() {
        let lip = mask("lip", vec![0, 1]);
        let a = seq(1, 2, |_, _| [0.0; 3]);
        assert_eq!(lve(&a, &a, &lip).unwrap(), 0.0);
        let b = seq(1, 2, |_, v| [if v == 0 { 1.0 } else { 3.0 }, 0.0, 0.0]);
        assert_eq!(lve(&a, &b, &lip).unwrap(), 3.0);
        let a2 = seq(2, 2, |_, _| [0.0; 3]);
        let c = seq(2, 2, |t, v| [if v == 1 { 2.0 + 2.0 * t as f64 } else { 0.0 }, 0.0, 0.0]);
        assert_eq!(lve(&a2, &c, &lip).unwrap(), 3.0);
    }

    #[test]
    fn fdd_examples() {
        let upper = mask("upper_face", vec![0, 1]);
        let template = vec![0.0; 6];
        let gt = seq(4, 2, |t, _| [t as f64, 0.0, 0.0]);
        assert_eq!(fdd(&gt, &gt, &upper, &template).unwrap(), 0.0);
        let s1 = seq(4, 2, |_, _| [1.0, 2.0, 3.0]);
        let s2 = seq(4, 2, |_, v| [v as f64, 5.0, 0.0]);
        assert_eq!(fdd(&s1, &s2, &upper, &template).unwrap(), 0.0);

        let frames = 200;
        let still = seq(frames, 2, |_, _| [0.0; 3]);
        let osc = seq(frames, 2, |t, v| [if v == 0 && t % 2 == 1 { 2.0 } else { 0.0 }, 0.0, 0.0]);
        let f = fdd(&still, &osc, &upper, &template).unwrap();
        assert!((f - 1.0 / 2.0).abs() < 1e-12, "{f}");
        assert!(fdd(&seq(1, 2, |_, _| [0.0; 3]), &seq(1, 2, |_, _| [0.0; 3]), &upper, &template).is_err());
    }

    #[test]
    fn sample_metric_examples() {
        let lip = mask("lip", vec![0]);
        let gt = seq(2, 2, |t, v| [t as f64, v as f64, 0.0]);
        let same = vec![gt.clone(), gt.clone(), gt.clone()];
        assert_eq!(mee(&gt, &same, &lip).unwrap(), 0.0);
        assert_eq!(ce(&gt, &same, &lip).unwrap(), 0.0);
        assert_eq!(diversity(&same).unwrap(), 0.0);

        let one = vec![seq(2, 2, |t, _| [t as f64 + 1.0, 0.0, 0.0])];
        let l = lve(&gt, &one[0], &lip).unwrap();
        assert_eq!(diversity(&one).unwrap(), 0.0);
        assert_eq!((mee(&gt, &one, &lip).unwrap(), ce(&gt, &one, &lip).unwrap()), (l, l));

        let shifted = vec![gt.clone(), seq(2, 2, |t, v| [t as f64, v as f64 + 2.0, 0.0])];
        assert!((diversity(&shifted).unwrap() - 2.0).abs() < 1e-12);
        assert!(diversity(&[]).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let still = heatmap_stats(&seq(5, 3, |_, v| [v as f64, 1.0, 2.0])).unwrap();
        assert!(still.iter().all(|s| s.mean_mm == 0.0 && s.std_mm == 0.0));
        let walk = heatmap_stats(&seq(6, 1, |t, _| [t as f64, 0.0, 0.0])).unwrap();
        assert_eq!((walk[0].mean_mm, walk[0].std_mm), (1.0, 0.0));
        let jumps = [0.0, 0.0, 2.0, 2.0, 4.0];
        let alt = heatmap_stats(&seq(5, 1, |t, _| [jumps[t], 0.0, 0.0])).unwrap();
        assert_eq!((alt[0].mean_mm, alt[0].std_mm), (1.0, 1.0));
        assert!(heatmap_stats(&seq(1, 1, |_, _| [0.0; 3])).is_err());
        assert_eq!(heatmap_csv(&walk), "vertex_index,mean_mm,std_mm\n0,1,0\n");
    }

    #[test]
    fn corpus_report_means_and_round_trip() {
        let lip = mask("lip", vec![0]);
        let upper = mask("upper_face", vec![1]);
        let template = vec![0.0; 6];
        let gt = seq(3, 2, |_, _| [0.0; 3]);
        let item = |k: &str, off: f64| EvalItem {
            key: k.into(),
            gt: gt.clone(),
            preds: vec![seq(3, 2, |_, _| [off, 0.0, 0.0])],
        };
        let single = evaluate_corpus(&[item("a", 1.0)], &lip, &upper, &template).unwrap();
        assert_eq!(single.mve, single.per_item[0].mve);
        let two = evaluate_corpus(&[item("a", 1.0), item("b", 3.0)], &lip, &upper, &template).unwrap();
        assert_eq!(two.mve, 2.0);
        assert_eq!(MetricReport::from_json(&two.to_json().unwrap()).unwrap(), two);
        assert!(evaluate_corpus(&[], &lip, &upper, &template).is_err());
    }
}
