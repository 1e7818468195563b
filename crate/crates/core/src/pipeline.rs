//! Wiring from a dataset and split to graph, features, trained models and
//! evaluation reports.

use std::fmt;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{idw_predict, knn_predict, nearest, pick, FitData, LinearBaseline, LinearKind, StationWind};
use crate::config::RunConfig;
use crate::datakit::{generate_synthetic, parse_station_csv, split, Dataset, Split, SplitSpec};
use crate::diffusion::{build_diffusion, plain_operator, DiffusionParams, SparseDiffusionMatrix};
use crate::encoder::{GraphContext, PropagatedFrames};
use crate::error::{Error, Result};
use crate::features::{FeatureLayout, FeatureStore, NormStats};
use crate::geo_graph::{build_node_set, knn_adjacency, Adjacency, GeoPoint, GridSpec, NodeSet};
use crate::metrics::{EvalReport, Variable};
use crate::objectives::Strategy;
use crate::trainer::{eval_anchors, observed, ModelData};

/// Observations plus the withheld stations suggested by their source.
pub struct LoadedData {
    pub dataset: Dataset,
    pub suggested_withheld: Option<Vec<String>>,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    if let Some(path) = &cfg.data.csv {
        let parsed = parse_station_csv(path).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())),
            e => e,
        })?;
        for issue in &parsed.issues {
            log::debug!("{}:{:?} {:?} {}", path.display(), issue.line, issue.kind, issue.message);
        }
        if !parsed.issues.is_empty() {
            log::warn!("{} issues while parsing {}", parsed.issues.len(), path.display());
        }
        return Ok(LoadedData { dataset: parsed.dataset, suggested_withheld: None });
    }
    let syn = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("no data source".into()))?;
    let data = generate_synthetic(syn)?;
    Ok(LoadedData { dataset: data.dataset, suggested_withheld: Some(data.withheld) })
}

pub fn resolve_split(cfg: &RunConfig, loaded: &LoadedData) -> Result<Split> {
    let spec = match (&cfg.split, &loaded.suggested_withheld) {
        (Some(s), _) => s.clone(),
        (None, Some(w)) => SplitSpec::Explicit { withheld: w.clone() },
        (None, None) => SplitSpec::default(),
    };
    split(&loaded.dataset.station_ids(), &spec)
}

/// Graph settings that determine the propagation operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphSettings {
    pub grid: GridSpec,
    pub k: usize,
    pub diffusion: DiffusionParams,
    pub no_diffusion: bool,
}

impl GraphSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { grid: cfg.grid, k: cfg.graph.k, diffusion: cfg.diffusion, no_diffusion: cfg.graph.no_diffusion }
    }
}

pub struct GraphArtifacts {
    pub nodes: NodeSet,
    pub adjacency: Adjacency,
    pub operator: SparseDiffusionMatrix<f64>,
}

pub fn build_graph(dataset: &Dataset, split: &Split, g: &GraphSettings) -> Result<GraphArtifacts> {
    let nodes = build_node_set(&dataset.sites(), &g.grid, &split.test)?;
    let adjacency = knn_adjacency(&nodes, g.k)?;
    let operator = if g.no_diffusion {
        plain_operator(&adjacency)
    } else {
        build_diffusion(&adjacency, &nodes.kinds(), &g.diffusion)?
    };
    Ok(GraphArtifacts { nodes, adjacency, operator })
}

/// Normalization statistics from the training stations over the whole
/// record.
pub fn norm_stats(dataset: &Dataset, split: &Split) -> Result<NormStats> {
    NormStats::compute(dataset, &split.train, 0..dataset.n_steps)
}

pub fn model_data(dataset: &Dataset, graph: &GraphArtifacts, stats: NormStats, layout: FeatureLayout) -> Result<ModelData> {
    let store = FeatureStore::build(dataset, &graph.nodes, &stats, layout)?;
    let ctx = GraphContext::new(&graph.operator, &graph.nodes)?;
    let frames = PropagatedFrames::build(&ctx.s, &store)?;
    ModelData::new(store, frames, ctx, graph.nodes.clone(), stats)
}

/// Display name of a learned configuration.
pub fn method_name(strategy: Strategy, use_moco: bool, no_diffusion: bool) -> String {
    let base = match (strategy, use_moco) {
        (Strategy::Augmented, true) => "ContraVirt(Augmented MoCo)",
        (Strategy::Multistep, true) => "ContraVirt(Multi-step MoCo)",
        (Strategy::Augmented, false) => "Augmented",
        (Strategy::Multistep, false) => "Multi-step",
        (Strategy::None, _) if no_diffusion => return "w/o Contrastive & Diffusion".into(),
        (Strategy::None, _) => "w/o Contrastive",
    };
    if no_diffusion {
        format!("{base} w/o Diffusion")
    } else {
        base.into()
    }
}

/// Learned configurations then baselines, as in the comparison table.
pub const METHOD_ORDER: [&str; 10] = [
    "ContraVirt(Augmented MoCo)",
    "ContraVirt(Multi-step MoCo)",
    "Augmented",
    "Multi-step",
    "w/o Contrastive",
    "w/o Contrastive & Diffusion",
    "AR",
    "LR",
    "KNN",
    "IDW",
];

/// Sorts method names by [`METHOD_ORDER`]; unknown names follow, sorted.
pub fn order_methods(mut methods: Vec<String>) -> Vec<String> {
    let rank = |m: &String| METHOD_ORDER.iter().position(|o| o == m).unwrap_or(METHOD_ORDER.len());
    methods.sort_by(|a, b| rank(a).cmp(&rank(b)).then_with(|| a.cmp(b)));
    methods.dedup();
    methods
}

/// File-name friendly form of a method name.
pub fn method_slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Ar,
    Lr,
    Knn,
    Idw,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Ar, Baseline::Lr, Baseline::Knn, Baseline::Idw];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Ar => "AR",
            Baseline::Lr => "LR",
            Baseline::Knn => "KNN",
            Baseline::Idw => "IDW",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(Baseline::Ar),
            "lr" => Ok(Baseline::Lr),
            "knn" => Ok(Baseline::Knn),
            "idw" => Ok(Baseline::Idw),
            other => Err(Error::Config(format!("unknown baseline {other:?} (expected ar, lr, knn or idw)"))),
        }
    }
}

/// Fitted regression baselines; everything here derives from the training
/// stations only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineFits {
    pub ar: LinearBaseline,
    pub lr: LinearBaseline,
}

pub struct BaselineContext<'a> {
    pub dataset: &'a Dataset,
    pub split: &'a Split,
    pub stats: &'a NormStats,
    pub layout: FeatureLayout,
    pub k: usize,
    pub ridge: f64,
    pub fit_stride: usize,
}

impl BaselineContext<'_> {
    fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.dataset
                    .station_index(id)
                    .ok_or_else(|| Error::Data(format!("station {id} missing from dataset")))
            })
            .collect()
    }

    fn sites(&self) -> Vec<GeoPoint> {
        self.dataset.stations.iter().map(|s| s.meta.location).collect()
    }

    pub fn fit(&self, wind: &StationWind) -> Result<BaselineFits> {
        let train = self.indices(&self.split.train)?;
        let sites = self.sites();
        let data = FitData { wind, sites: &sites, train: &train, period: 0..self.dataset.n_steps, stride: self.fit_stride };
        let (t_in, t_out) = (self.layout.t_in, self.layout.t_out);
        Ok(BaselineFits {
            ar: LinearBaseline::fit(LinearKind::Ar, &data, self.k, t_in, t_out, self.ridge)?,
            lr: LinearBaseline::fit(LinearKind::Lr, &data, self.k, t_in, t_out, self.ridge)?,
        })
    }

    /// Scores the requested baselines at the withheld stations.
    pub fn evaluate(&self, which: &[Baseline], anchors: &[usize]) -> Result<(EvalReport, Option<BaselineFits>)> {
        let wind = StationWind::build(self.dataset, self.stats);
        let needs_fit = which.iter().any(|b| matches!(b, Baseline::Ar | Baseline::Lr));
        let fits = if needs_fit { Some(self.fit(&wind)?) } else { None };
        let train = self.indices(&self.split.train)?;
        let test = self.indices(&self.split.test)?;
        let sites = self.sites();
        let t_out = self.layout.t_out;
        let mut report = EvalReport::new();
        for (&s, id) in test.iter().zip(&self.split.test) {
            let nb = nearest(&sites, sites[s], &train, None, self.k);
            if nb.len() < self.k {
                return Err(Error::Data(format!("station {id} has fewer than {} training neighbours", self.k)));
            }
            let nb_idx: Vec<usize> = nb.iter().map(|&(i, _)| i).collect();
            for &t in anchors {
                for &b in which {
                    let per_lead: Vec<(f64, f64, f64)> = match b {
                        Baseline::Idw | Baseline::Knn => {
                            let Some(obs) = wind.observations(&nb, t) else { continue };
                            let p = if b == Baseline::Idw { idw_predict(&obs, self.k)? } else { knn_predict(&obs, self.k)? };
                            vec![p; t_out]
                        }
                        Baseline::Ar | Baseline::Lr => {
                            let fits = fits.as_ref().expect("fitted");
                            let model = if b == Baseline::Ar { &fits.ar } else { &fits.lr };
                            let Some(x) = wind.stencil(&nb_idx, t, self.layout.t_in) else { continue };
                            model.predict(&x, self.stats).into_iter().map(|d| (d.dd, d.ff, d.gff)).collect()
                        }
                    };
                    for (l, &(dd, ff, gff)) in per_lead.iter().enumerate() {
                        let at = t + 1 + l;
                        let time = self.dataset.timestamp(at);
                        let d = crate::features::Decoded { dd, ff, gff, direction_undefined: false };
                        for v in Variable::ALL {
                            if let Some(truth) = observed(self.dataset, id, at, v) {
                                report.add(b.name(), v, l + 1, id, time, pick(&d, v), truth);
                            }
                        }
                    }
                }
            }
        }
        Ok((report, fits))
    }
}

/// Dataset, split, graph and features for one propagation operator.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: Split,
    pub graph: GraphArtifacts,
    pub data: ModelData,
}

impl Prepared {
    pub fn new(dataset: Dataset, split: Split, settings: &GraphSettings, layout: FeatureLayout) -> Result<Self> {
        let graph = build_graph(&dataset, &split, settings)?;
        let stats = norm_stats(&dataset, &split)?;
        let data = model_data(&dataset, &graph, stats, layout)?;
        info!(
            "prepared {} nodes ({} real), {} steps, {} filled wind values",
            graph.nodes.len(),
            graph.nodes.real_ids().len(),
            dataset.n_steps,
            data.store.filled_steps
        );
        Ok(Self { dataset, split, graph, data })
    }

    pub fn eval_anchors(&self, stride: usize) -> Vec<usize> {
        eval_anchors(&self.data.store, stride)
    }

    pub fn baselines(&self, k: usize, ridge: f64, fit_stride: usize) -> BaselineContext<'_> {
        BaselineContext {
            dataset: &self.dataset,
            split: &self.split,
            stats: &self.data.stats,
            layout: self.data.store.layout,
            k,
            ridge,
            fit_stride,
        }
    }
}
