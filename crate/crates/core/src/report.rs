//! CSV and JSON artifacts.
//!
//! | file                  | columns                                              |
//! |-----------------------|------------------------------------------------------|
//! | `metrics.csv`         | `step,L_y,L_en,L_kl,L_ad,L_d,total,mode,val_metric`  |
//! | `gate_values.csv`     | `id,cluster,p_0..p_{K-1}`                            |
//! | `encoder_outputs.csv` | `id,v_0..v_{D-1},cluster,true_domain`                |
//! | predictions           | `id,mode,prediction,p_0..p_{K-1}` (gates MIX only)   |
//! | datasets              | `x_0..x_{n-1},y,d`                                   |
//!
//! Floats are written in Rust's shortest round-trip form, so a rerun with the
//! same seed reproduces files byte for byte.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gating::assign_cluster;
use crate::inference::{predict_mix, predict_ood, score, PredictMode, Prediction};
use crate::metrics::{cluster_purity, silhouette};
use crate::model::HmoeModel;
use crate::tensor::Tensor;
use crate::training::{LossComponents, MetricRow, TrainOutcome};

fn num(v: f64) -> String {
    format!("{v}")
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

pub fn write_metrics<W: Write>(w: W, history: &[MetricRow]) -> Result<()> {
    let mut out = writer(w);
    out.write_record([
        "step",
        "L_y",
        "L_en",
        "L_kl",
        "L_ad",
        "L_d",
        "total",
        "mode",
        "val_metric",
    ])?;
    for row in history {
        let l = &row.losses;
        out.write_record([
            row.step.to_string(),
            num(l.l_y),
            num(l.l_en),
            num(l.l_kl),
            num(l.l_ad),
            num(l.l_d),
            num(l.total),
            row.mode.to_string(),
            row.val_metric.map(num).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn prefixed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}_{i}"))
}

pub fn write_gate_values<W: Write>(w: W, gates: &Tensor) -> Result<()> {
    let (m, k) = gates.dims2()?;
    let clusters = assign_cluster(gates)?;
    let mut out = writer(w);
    let mut header = vec!["id".to_string(), "cluster".to_string()];
    header.extend(prefixed("p", k));
    out.write_record(&header)?;
    for i in 0..m {
        let mut rec = vec![i.to_string(), clusters[i].to_string()];
        rec.extend(gates.row(i).iter().map(|&p| num(p)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_encoder_outputs<W: Write>(
    w: W,
    v: &Tensor,
    clusters: &[usize],
    domains: &[usize],
) -> Result<()> {
    let (m, d) = v.dims2()?;
    if clusters.len() != m || domains.len() != m {
        return Err(Error::Dimension("encoder dump rows differ".into()));
    }
    let mut out = writer(w);
    let mut header = vec!["id".to_string()];
    header.extend(prefixed("v", d));
    header.push("cluster".into());
    header.push("true_domain".into());
    out.write_record(&header)?;
    for i in 0..m {
        let mut rec = vec![i.to_string()];
        rec.extend(v.row(i).iter().map(|&x| num(x)));
        rec.push(clusters[i].to_string());
        rec.push(domains[i].to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Predicted class (classification) or value (regression) per row.
pub fn write_predictions<W: Write>(w: W, pred: &Prediction, classification: bool) -> Result<()> {
    let (m, _) = pred.output.dims2()?;
    let classes = if classification {
        Some(pred.classes()?)
    } else {
        None
    };
    let k = match &pred.gate {
        Some(g) => g.dims2()?.1,
        None => 0,
    };
    let mut out = writer(w);
    let mut header = vec![
        "id".to_string(),
        "mode".to_string(),
        "prediction".to_string(),
    ];
    header.extend(prefixed("p", k));
    out.write_record(&header)?;
    for i in 0..m {
        let value = match &classes {
            Some(c) => c[i].to_string(),
            None => num(pred.output.row(i)[0]),
        };
        let mut rec = vec![i.to_string(), pred.mode.to_string(), value];
        if let Some(g) = &pred.gate {
            rec.extend(g.row(i).iter().map(|&p| num(p)));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(w: W, data: &Dataset) -> Result<()> {
    data.validate()?;
    let mut out = writer(w);
    let mut header: Vec<String> = prefixed("x", data.input_dim()).collect();
    header.push("y".into());
    header.push("d".into());
    out.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x[i].iter().map(|&x| num(x)).collect();
        rec.push(if data.n_classes.is_some() {
            (data.y[i] as usize).to_string()
        } else {
            num(data.y[i])
        });
        rec.push(data.d[i].to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: &Path, data: &Dataset) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, data)
}

/// Reads a dataset CSV. Class labels must be integers; the class count is
/// one more than the largest label.
pub fn read_dataset<R: std::io::Read>(r: R, classification: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = reader.headers()?.clone();
    let n = header.len();
    if n < 3 || &header[n - 2] != "y" || &header[n - 1] != "d" {
        return Err(Error::Data(
            "dataset header must be x_0..x_{n-1},y,d".into(),
        ));
    }
    let mut data = Dataset {
        x: Vec::new(),
        y: Vec::new(),
        d: Vec::new(),
        n_classes: None,
    };
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("row {}: bad number `{}`", line + 1, &rec[j])))
        };
        data.x.push((0..n - 2).map(field).collect::<Result<_>>()?);
        data.y.push(field(n - 2)?);
        data.d.push(
            rec[n - 1].trim().parse().map_err(|_| {
                Error::Data(format!("row {}: bad domain `{}`", line + 1, &rec[n - 1]))
            })?,
        );
    }
    if data.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    if classification {
        if data.y.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Data(
                "class labels must be non-negative integers".into(),
            ));
        }
        data.n_classes = Some(data.y.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1);
    }
    data.validate()?;
    Ok(data)
}

pub fn read_dataset_csv(path: &Path, classification: bool) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, classification)
}

/// MIX and OOD scores on one dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mix: f64,
    pub ood: f64,
}

impl ModeMetrics {
    pub fn evaluate(model: &HmoeModel, data: &Dataset) -> Result<Self> {
        let x = data.inputs()?;
        let classification = data.n_classes.is_some();
        Ok(ModeMetrics {
            mix: score(&predict_mix(model, &x)?, &data.y, classification)?,
            ood: score(&predict_ood(model, &x)?, &data.y, classification)?,
        })
    }
}

/// Clustering diagnostics of the encoder on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    /// Silhouette of encoder outputs under argmax-gate clusters; absent with
    /// fewer than two clusters in use.
    pub silhouette: Option<f64>,
    /// Purity of argmax-gate clusters against the true domains.
    pub purity: f64,
    pub clusters_used: usize,
}

impl ClusterMetrics {
    pub fn evaluate(model: &HmoeModel, data: &Dataset) -> Result<Self> {
        let x = data.inputs()?;
        let v = model.embed(&x)?;
        let clusters = predict_mix(model, &x)?.clusters().unwrap_or_default();
        let points: Vec<Vec<f64>> = (0..data.len()).map(|i| v.row(i).to_vec()).collect();
        let mut used = clusters.clone();
        used.sort_unstable();
        used.dedup();
        Ok(ClusterMetrics {
            silhouette: silhouette(&points, &clusters).ok(),
            purity: cluster_purity(&clusters, &data.d)?,
            clusters_used: used.len(),
        })
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    /// `accuracy` for classification, `mse` for regression.
    pub metric: String,
    pub steps_run: usize,
    pub final_losses: Option<LossComponents>,
    pub switch_step: Option<usize>,
    /// `max/min` expert importance on the last training batch.
    pub final_importance_ratio: Option<f64>,
    pub min_embedding_distance: f64,
    pub train: ModeMetrics,
    pub val: ModeMetrics,
    pub clustering: ClusterMetrics,
}

impl Summary {
    pub fn build(
        cfg: &ExperimentConfig,
        outcome: &TrainOutcome,
        train: &Dataset,
        val: &Dataset,
    ) -> Result<Self> {
        let model = &outcome.model;
        Ok(Summary {
            config: cfg.clone(),
            metric: if train.n_classes.is_some() {
                "accuracy"
            } else {
                "mse"
            }
            .into(),
            steps_run: outcome.history.len(),
            final_losses: outcome.final_losses(),
            switch_step: outcome.switch_step,
            final_importance_ratio: outcome.final_importance.as_ref().map(|i| i.max_min_ratio()),
            min_embedding_distance: model.embeddings.min_pairwise_distance(),
            train: ModeMetrics::evaluate(model, train)?,
            val: ModeMetrics::evaluate(model, val)?,
            clustering: ClusterMetrics::evaluate(model, train)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evaluation result of one mode, as printed by `hmoe eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PredictMode,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LossMode;

    fn toy() -> Dataset {
        Dataset {
            x: vec![vec![0.25, -1.0], vec![1e-17, 3.5]],
            y: vec![0.1, -2.0 / 3.0],
            d: vec![0, 1],
            n_classes: None,
        }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let data = toy();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_0,x_1,y,d\n"));
        assert_eq!(read_dataset(&buf[..], false).unwrap(), data);
    }

    #[test]
    fn classification_labels_set_class_count() {
        let text = "x_0,y,d\n0.5,2,0\n1.5,0,1\n";
        let data = read_dataset(text.as_bytes(), true).unwrap();
        assert_eq!(data.n_classes, Some(3));
        assert!(read_dataset("x_0,y,d\n0.5,1.5,0\n".as_bytes(), true).is_err());
    }

    #[test]
    fn empty_or_malformed_datasets_are_rejected() {
        assert!(matches!(
            read_dataset("x_0,y,d\n".as_bytes(), false),
            Err(Error::Data(_))
        ));
        assert!(read_dataset("a,b\n1,2\n".as_bytes(), false).is_err());
        assert!(read_dataset("x_0,y,d\nfoo,1,0\n".as_bytes(), false).is_err());
    }

    #[test]
    fn metrics_layout() {
        let rows = vec![
            MetricRow {
                step: 0,
                losses: LossComponents {
                    l_y: 0.5,
                    total: 0.5,
                    ..Default::default()
                },
                mode: LossMode::Erm,
                val_metric: None,
            },
            MetricRow {
                step: 1,
                losses: LossComponents::default(),
                mode: LossMode::Mixup,
                val_metric: Some(0.25),
            },
        ];
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,L_y,L_en,L_kl,L_ad,L_d,total,mode,val_metric\n\
             0,0.5,0,0,0,0,0.5,erm,\n\
             1,0,0,0,0,0,0,mixup,0.25\n"
        );
    }

    #[test]
    fn gate_dump_names_clusters() {
        let g = Tensor::new(vec![2, 3], vec![0.2, 0.7, 0.1, 0.5, 0.25, 0.25]).unwrap();
        let mut buf = Vec::new();
        write_gate_values(&mut buf, &g).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "id,cluster,p_0,p_1,p_2\n0,1,0.2,0.7,0.1\n1,0,0.5,0.25,0.25\n"
        );
    }
}
