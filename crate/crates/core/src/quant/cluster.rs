use std::collections::{HashMap, HashSet};

use super::{fit_scale, nearest_level, BitWidth, Precision, QuantTable};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerLm};
use crate::tensor::Tensor;

/// A group of weight matrices sharing one quantization table.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClusterSpec {
    pub id: String,
    pub members: Vec<String>,
    pub count: usize,
}

impl ClusterSpec {
    /// Member values concatenated in member order.
    pub fn gather(&self, model: &TransformerLm) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.count);
        for name in &self.members {
            let t = model
                .param(name)
                .ok_or_else(|| Error::Incompatible(format!("model has no tensor `{name}`")))?;
            out.extend_from_slice(t.data());
        }
        if out.len() != self.count {
            return Err(Error::Incompatible(format!(
                "cluster `{}` holds {} values, expected {}",
                self.id,
                out.len(),
                self.count
            )));
        }
        Ok(out)
    }

    /// Writes `values` back into the member tensors.
    pub fn scatter(&self, model: &mut TransformerLm, values: &[f32]) -> Result<()> {
        if values.len() != self.count {
            return Err(Error::shape(
                "scatter",
                format!("{} values for cluster `{}` of {}", values.len(), self.id, self.count),
            ));
        }
        let mut offset = 0;
        for name in &self.members {
            let t = model
                .param_mut(name)
                .ok_or_else(|| Error::Incompatible(format!("model has no tensor `{name}`")))?;
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Quantizable clusters of a model: the embeddings (when enabled), each
/// layer's attention projections, each layer's feed-forward matrices and the
/// untied output projection.
pub fn model_clusters(config: &ModelConfig, quantize_embeddings: bool) -> Vec<ClusterSpec> {
    let shapes: HashMap<String, usize> = TransformerLm::param_shapes(config)
        .into_iter()
        .map(|(n, s)| (n, s.iter().product()))
        .collect();
    let spec = |id: String, members: Vec<String>| ClusterSpec {
        count: members.iter().map(|m| shapes[m]).sum(),
        id,
        members,
    };
    let mut out = Vec::new();
    if quantize_embeddings {
        out.push(spec("embed".into(), vec!["embed.tok".into(), "embed.pos".into()]));
    }
    for i in 0..config.n_layers {
        out.push(spec(
            format!("layer{i}.attn"),
            ["Q", "K", "V", "Wh"].iter().map(|m| format!("layer{i}.{m}")).collect(),
        ));
        out.push(spec(
            format!("layer{i}.ffn"),
            ["W1", "W2"].iter().map(|m| format!("layer{i}.{m}")).collect(),
        ));
    }
    if !config.tie_embeddings {
        out.push(spec("out".into(), vec!["out.proj".into()]));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterQuantization {
    pub table: QuantTable,
    pub levels: Vec<i8>,
    pub values: Vec<f32>,
    /// `‖Q(W) − W‖²` against the stored (f32) quantized values.
    pub perturbation: f64,
}

pub fn quantize_cluster(weights: &[f32], bits: BitWidth) -> Result<ClusterQuantization> {
    let table = fit_scale(weights, bits)?;
    Ok(quantize_with_table(weights, &table))
}

pub fn quantize_with_table(weights: &[f32], table: &QuantTable) -> ClusterQuantization {
    let mut levels = Vec::with_capacity(weights.len());
    let mut values = Vec::with_capacity(weights.len());
    let mut perturbation = 0.0f64;
    for &w in weights {
        let l = nearest_level(f64::from(w), table);
        let q = table.value_f32(l);
        levels.push(l as i8);
        values.push(q);
        let d = f64::from(q) - f64::from(w);
        perturbation += d * d;
    }
    ClusterQuantization {
        table: *table,
        levels,
        values,
        perturbation,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCluster {
    pub spec: ClusterSpec,
    pub table: QuantTable,
    pub levels: Vec<i8>,
}

impl QuantizedCluster {
    pub fn values(&self) -> Vec<f32> {
        self.levels
            .iter()
            .map(|&l| self.table.value_f32(i32::from(l)))
            .collect()
    }
}

/// A model whose clusters are stored as level indices plus one scale each,
/// with every other parameter kept in full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    config: ModelConfig,
    clusters: Vec<QuantizedCluster>,
    residue: Vec<(String, Tensor)>,
}

impl QuantizedModel {
    /// Checks that clusters and residue cover each parameter exactly once with
    /// the expected sizes and that every level lies on its grid.
    pub fn new(
        config: ModelConfig,
        clusters: Vec<QuantizedCluster>,
        residue: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes: HashMap<String, Vec<usize>> =
            TransformerLm::param_shapes(&config).into_iter().collect();
        let mut seen = HashSet::new();
        for c in &clusters {
            let mut count = 0;
            for m in &c.spec.members {
                let shape = shapes
                    .get(m)
                    .ok_or_else(|| Error::format(m.clone(), "unknown tensor in cluster"))?;
                if !seen.insert(m.clone()) {
                    return Err(Error::format(m.clone(), "tensor appears twice"));
                }
                count += shape.iter().product::<usize>();
            }
            if count != c.spec.count || c.levels.len() != count {
                return Err(Error::format(
                    c.spec.id.clone(),
                    format!(
                        "cluster holds {} levels, members hold {count}",
                        c.levels.len()
                    ),
                ));
            }
            if let Some(l) = c.levels.iter().find(|&&l| !c.table.contains_level(i32::from(l))) {
                return Err(Error::format(
                    c.spec.id.clone(),
                    format!("level {l} outside the {}-bit grid", c.table.bits()),
                ));
            }
        }
        for (name, t) in &residue {
            let shape = shapes
                .get(name)
                .ok_or_else(|| Error::format(name.clone(), "unknown residue tensor"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    name.clone(),
                    format!("shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::format(name.clone(), "tensor appears twice"));
            }
        }
        if let Some(missing) = shapes.keys().find(|n| !seen.contains(*n)) {
            return Err(Error::format(missing.clone(), "tensor missing"));
        }
        Ok(QuantizedModel {
            config,
            clusters,
            residue,
        })
    }

    /// Fits and quantizes every cluster whose precision is below 32 bits.
    pub fn quantize(model: &TransformerLm, assignment: &[(ClusterSpec, Precision)]) -> Result<Self> {
        let mut clusters = Vec::new();
        for (spec, precision) in assignment {
            if let Precision::Quantized(bits) = precision {
                let q = quantize_cluster(&spec.gather(model)?, *bits)?;
                clusters.push(QuantizedCluster {
                    spec: spec.clone(),
                    table: q.table,
                    levels: q.levels,
                });
            }
        }
        Self::assemble(model, clusters)
    }

    /// Wraps a model whose cluster weights already lie on the given grids.
    pub fn from_projected(model: &TransformerLm, tables: &[(ClusterSpec, QuantTable)]) -> Result<Self> {
        let mut clusters = Vec::new();
        for (spec, table) in tables {
            let weights = spec.gather(model)?;
            let q = quantize_with_table(&weights, table);
            if q.values != weights {
                return Err(Error::Incompatible(format!(
                    "cluster `{}` is not on its {}-bit grid",
                    spec.id,
                    table.bits()
                )));
            }
            clusters.push(QuantizedCluster {
                spec: spec.clone(),
                table: *table,
                levels: q.levels,
            });
        }
        Self::assemble(model, clusters)
    }

    fn assemble(model: &TransformerLm, clusters: Vec<QuantizedCluster>) -> Result<Self> {
        let quantized: HashSet<&String> = clusters.iter().flat_map(|c| &c.spec.members).collect();
        let residue = model
            .named_params()
            .into_iter()
            .filter(|(n, _)| !quantized.contains(n))
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Self::new(model.config, clusters, residue)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn clusters(&self) -> &[QuantizedCluster] {
        &self.clusters
    }

    pub fn residue(&self) -> &[(String, Tensor)] {
        &self.residue
    }

    /// Precision of each quantized cluster, by id.
    pub fn bit_map(&self) -> Vec<(String, BitWidth)> {
        self.clusters
            .iter()
            .map(|c| (c.spec.id.clone(), c.table.bits()))
            .collect()
    }

    /// Full-precision model holding the grid values.
    pub fn dequantize(&self) -> Result<TransformerLm> {
        let shapes: HashMap<String, Vec<usize>> =
            TransformerLm::param_shapes(&self.config).into_iter().collect();
        let mut tensors: HashMap<String, Tensor> = self.residue.iter().cloned().collect();
        for c in &self.clusters {
            let values = c.values();
            let mut offset = 0;
            for m in &c.spec.members {
                let shape = &shapes[m];
                let n: usize = shape.iter().product();
                tensors.insert(m.clone(), Tensor::new(shape.clone(), values[offset..offset + n].to_vec())?);
                offset += n;
            }
        }
        TransformerLm::from_named(self.config, tensors)
    }
}
