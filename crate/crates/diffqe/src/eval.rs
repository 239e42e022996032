//! PSNR / delta-PSNR computation, manifest evaluation, and report tables.

use crate::dataset::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::{ModelWeights, Variant};
use crate::plane::Plane;

/// Peak signal-to-noise ratio in dB over [0, 1] planes (peak 1, equivalently
/// peak 255 on the 8-bit scale). Identical planes return +inf.
pub fn psnr(a: &Plane, b: &Plane) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "psnr dims differ: {}x{} vs {}x{}",
            a.w, a.h, b.w, b.h
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / (a.w * a.h) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Enhanced-minus-compressed PSNR against ground truth.
///
/// A compressed plane identical to ground truth has no headroom to measure,
/// so that case is reported as an error rather than a meaningless delta.
pub fn delta_psnr(enhanced: &Plane, compressed: &Plane, gt: &Plane) -> Result<f64> {
    let hm = psnr(compressed, gt)?;
    if hm.is_infinite() {
        return Err(Error::Range(
            "degenerate sample: compressed plane equals ground truth".into(),
        ));
    }
    let en = psnr(enhanced, gt)?;
    Ok(en - hm)
}

/// Report column identity. Order is fixed: full, nodiff, noest, baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EvalVariant {
    Full,
    NoDiff,
    NoEst,
    Baseline,
}

impl EvalVariant {
    pub const ORDER: [EvalVariant; 4] =
        [EvalVariant::Full, EvalVariant::NoDiff, EvalVariant::NoEst, EvalVariant::Baseline];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalVariant::Full => "full",
            EvalVariant::NoDiff => "nodiff",
            EvalVariant::NoEst => "noest",
            EvalVariant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(EvalVariant::Full),
            "nodiff" => Ok(EvalVariant::NoDiff),
            "noest" => Ok(EvalVariant::NoEst),
            "baseline" => Ok(EvalVariant::Baseline),
            _ => Err(Error::Config(format!("unknown variant: {s}"))),
        }
    }
}

impl From<Variant> for EvalVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Full => EvalVariant::Full,
            Variant::NoEst => EvalVariant::NoEst,
            Variant::NoDiff => EvalVariant::NoDiff,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub source_id: String,
    pub qp: u8,
    pub variant: EvalVariant,
    pub psnr_hm: f64,
    pub psnr_en: f64,
    pub delta_psnr: f64,
}

/// Read access to compressed planes only; the enhancement pass is typed
/// against this so it cannot touch ground truth.
pub trait CompressedSource {
    fn load_compressed(&self, e: &ManifestEntry) -> Result<Plane>;
}

/// Read access to ground-truth planes (metrics pass).
pub trait GtSource {
    fn load_gt(&self, e: &ManifestEntry) -> Result<Plane>;
}

pub struct ManifestStore<'a> {
    pub manifest: &'a DatasetManifest,
}

impl CompressedSource for ManifestStore<'_> {
    fn load_compressed(&self, e: &ManifestEntry) -> Result<Plane> {
        crate::codec::read_plane_file(&self.manifest.resolve(&e.compressed_path), e.w, e.h)
    }
}

impl GtSource for ManifestStore<'_> {
    fn load_gt(&self, e: &ManifestEntry) -> Result<Plane> {
        crate::codec::read_plane_file(&self.manifest.resolve(&e.gt_path), e.w, e.h)
    }
}

/// What to run over the manifest: a trained model or the no-op baseline.
#[derive(Clone, Copy)]
pub enum Evaluatee<'a> {
    Model(&'a ModelWeights<f32>),
    Baseline,
}

impl Evaluatee<'_> {
    pub fn variant(&self) -> EvalVariant {
        match self {
            Evaluatee::Model(w) => w.variant.into(),
            Evaluatee::Baseline => EvalVariant::Baseline,
        }
    }
}

/// Enhancement pass: compressed planes in, enhanced planes out. Ground truth
/// is not reachable from here by construction.
pub fn enhance_entries(
    model: Evaluatee,
    entries: &[ManifestEntry],
    store: &impl CompressedSource,
    seed: u64,
) -> Result<Vec<Plane>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let img = store.load_compressed(e)?;
            match model {
                Evaluatee::Baseline => Ok(img),
                Evaluatee::Model(w) => w.enhance(&img, seed.wrapping_add(i as u64)),
            }
        })
        .collect()
}

/// Metrics pass over the enhancement results.
pub fn score_entries(
    entries: &[ManifestEntry],
    enhanced: &[Plane],
    store: &(impl CompressedSource + GtSource),
    variant: EvalVariant,
) -> Result<Vec<EvalRecord>> {
    entries
        .iter()
        .zip(enhanced)
        .map(|(e, en_plane)| {
            let gt = store.load_gt(e)?;
            let compressed = store.load_compressed(e)?;
            let psnr_hm = psnr(&compressed, &gt)?;
            if psnr_hm.is_infinite() {
                return Err(Error::Range(format!(
                    "degenerate sample {} qp {}: compressed equals ground truth",
                    e.source_id, e.qp
                )));
            }
            let psnr_en = psnr(en_plane, &gt)?;
            Ok(EvalRecord {
                source_id: e.source_id.clone(),
                qp: e.qp,
                variant,
                psnr_hm,
                psnr_en,
                delta_psnr: psnr_en - psnr_hm,
            })
        })
        .collect()
}

/// One record per manifest entry; deterministic given `seed`.
pub fn evaluate_with<S: CompressedSource + GtSource>(
    model: Evaluatee,
    manifest: &DatasetManifest,
    seed: u64,
    store: &S,
) -> Result<Vec<EvalRecord>> {
    if manifest.split == Split::Train {
        return Err(Error::Config(
            "evaluation runs on val or test manifests, not train".into(),
        ));
    }
    let enhanced = enhance_entries(model, &manifest.entries, store, seed)?;
    score_entries(&manifest.entries, &enhanced, store, model.variant())
}

pub fn evaluate(model: Evaluatee, manifest: &DatasetManifest, seed: u64) -> Result<Vec<EvalRecord>> {
    evaluate_with(model, manifest, seed, &ManifestStore { manifest })
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

fn parse_db(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| Error::Config(format!("bad dB value: {s}"))),
    }
}

/// Machine-readable rows: comma-separated with a fixed header.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("source_id,qp,variant,psnr_hm,psnr_en,delta_psnr\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.source_id,
            r.qp,
            r.variant.as_str(),
            fmt_db(r.psnr_hm),
            fmt_db(r.psnr_en),
            fmt_db(r.delta_psnr)
        ));
    }
    s
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "source_id,qp,variant,psnr_hm,psnr_en,delta_psnr" {
        return Err(Error::Config(format!("bad records header: {header}")));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Config(format!("bad record row: {line}")));
        }
        out.push(EvalRecord {
            source_id: cols[0].to_string(),
            qp: cols[1].parse().map_err(|_| Error::Config(format!("bad qp: {}", cols[1])))?,
            variant: EvalVariant::parse(cols[2])?,
            psnr_hm: parse_db(cols[3])?,
            psnr_en: parse_db(cols[4])?,
            delta_psnr: parse_db(cols[5])?,
        });
    }
    Ok(out)
}

/// Mean over finite values with the count of excluded infinities.
fn finite_mean(values: &[f64]) -> (Option<f64>, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = values.len() - finite.len();
    if finite.is_empty() {
        (None, excluded)
    } else {
        (Some(finite.iter().sum::<f64>() / finite.len() as f64), excluded)
    }
}

/// Mean delta-PSNR for one variant over all its records (infinities
/// excluded). None when the variant has no finite records.
pub fn mean_delta(records: &[EvalRecord], variant: EvalVariant) -> Option<f64> {
    let vals: Vec<f64> =
        records.iter().filter(|r| r.variant == variant).map(|r| r.delta_psnr).collect();
    finite_mean(&vals).0
}

/// Group by QP and variant; mean delta-PSNR per cell plus an overall row.
pub fn report(records: &[EvalRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Config("no records to report".into()));
    }
    let variants: Vec<EvalVariant> = EvalVariant::ORDER
        .into_iter()
        .filter(|v| records.iter().any(|r| r.variant == *v))
        .collect();
    let mut qps: Vec<u8> = records.iter().map(|r| r.qp).collect();
    qps.sort_unstable();
    qps.dedup();

    let cell = |qp: Option<u8>, variant: EvalVariant| -> String {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.variant == variant && qp.map(|q| r.qp == q).unwrap_or(true))
            .map(|r| r.delta_psnr)
            .collect();
        if vals.is_empty() {
            return "-".into();
        }
        let (mean, excluded) = finite_mean(&vals);
        let base = match mean {
            Some(m) => format!("{m:+.4}"),
            None => "inf".into(),
        };
        if excluded > 0 {
            format!("{base} ({excluded} inf excl.)")
        } else {
            base
        }
    };

    let mut cols = vec!["qp".to_string()];
    cols.extend(variants.iter().map(|v| v.as_str().to_string()));
    let mut rows: Vec<Vec<String>> = vec![cols];
    for &qp in &qps {
        let mut row = vec![qp.to_string()];
        row.extend(variants.iter().map(|&v| cell(Some(qp), v)));
        rows.push(row);
    }
    let mut avg = vec!["average".to_string()];
    avg.extend(variants.iter().map(|&v| cell(None, v)));
    rows.push(avg);

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::from("mean delta-PSNR (dB) by qp and variant\n");
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}", w = w)).collect();
        out.push_str(&line.join("  "));
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    Ok(out)
}
