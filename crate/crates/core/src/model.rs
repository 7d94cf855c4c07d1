//! Model configuration, parameter layout and frozen-weight inference.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, ReferenceEncoder, SentenceEncoder};
use crate::enrichment::{self, EnrichmentTrace, HeadOptions};
use crate::error::{Error, Result};
use crate::inference::{CompiledHead, ContextProjections};
use crate::matching::{self, Comparison, BE_SCORER};
use crate::params::ParamSet;
use crate::store::{EmbeddingStore, StoreKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub comparison: Comparison,
    /// Hidden width of both feed-forward scorers.
    pub scorer_hidden: usize,
    pub attention_width: usize,
    pub head: HeadOptions,
}

impl ModelConfig {
    /// Defaults: scorer width 2d, attention width d, literal comparison.
    pub fn new(encoder: EncoderConfig) -> Self {
        ModelConfig {
            encoder,
            comparison: Comparison::Literal,
            scorer_hidden: 2 * encoder.hidden_dim,
            attention_width: encoder.hidden_dim,
            head: HeadOptions::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.scorer_hidden == 0 || self.attention_width == 0 {
            return Err(Error::Config("scorer and attention widths must be positive".into()));
        }
        Ok(())
    }

    /// Fresh parameters for every component.
    pub fn init_params(&self, seed: u64) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = self.dim();
        self.encoder.init_params(&mut p, &mut rng);
        matching::init_scorer(&mut p, BE_SCORER, self.comparison.width(d), self.scorer_hidden, &mut rng);
        enrichment::init_params(&mut p, d, self.comparison, self.attention_width, self.scorer_hidden, &mut rng);
        p
    }
}

/// Cached neighbor lists keyed by response id, holding the top `depth`
/// context rows for every row of a response store.
#[derive(Clone, Debug, Default)]
pub struct NeighborTable {
    depth: usize,
    lists: HashMap<u64, Vec<(u64, f32, usize)>>,
}

impl NeighborTable {
    pub fn build(contexts: &EmbeddingStore, responses: &EmbeddingStore, depth: usize) -> Result<Self> {
        let pos: HashMap<u64, usize> = contexts.ids().iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let none = HashSet::new();
        let mut lists = HashMap::with_capacity(responses.len());
        for (i, &rid) in responses.ids().iter().enumerate() {
            let hits = contexts.top_k(responses.row(i), depth, &none)?;
            lists.insert(rid, hits.iter().map(|h| (h.id, h.similarity, pos[&h.id])).collect());
        }
        Ok(NeighborTable { depth, lists })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

/// Context store, response store and an optional neighbor cache.
#[derive(Clone, Debug)]
pub struct Stores {
    pub contexts: EmbeddingStore,
    pub responses: EmbeddingStore,
    cache: Option<NeighborTable>,
    projections: Option<ContextProjections>,
}

/// Retrieved neighbor rows for one response.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Retrieved {
    pub ids: Vec<u64>,
    pub similarities: Vec<f32>,
    pub rows: Vec<usize>,
}

impl Stores {
    pub fn new(contexts: EmbeddingStore, responses: EmbeddingStore) -> Result<Self> {
        if contexts.kind() != StoreKind::Context || responses.kind() != StoreKind::Response {
            return Err(Error::Config("store kinds must be (context, response)".into()));
        }
        if contexts.dim() != responses.dim() {
            return Err(Error::shape("stores", &[contexts.dim()], &[responses.dim()]));
        }
        Ok(Stores {
            contexts,
            responses,
            cache: None,
            projections: None,
        })
    }

    /// Precomputes neighbor lists `depth` deep for every response.
    pub fn with_neighbor_cache(mut self, depth: usize) -> Result<Self> {
        self.cache = Some(NeighborTable::build(&self.contexts, &self.responses, depth)?);
        Ok(self)
    }

    pub fn neighbor_cache(&self) -> Option<&NeighborTable> {
        self.cache.as_ref()
    }

    pub fn projections(&self) -> Option<&ContextProjections> {
        self.projections.as_ref()
    }

    /// Neighbors of `response_id` among the contexts. Served from the cache
    /// when it is deep enough and nothing is excluded.
    pub fn neighbors(&self, response_id: u64, k: usize, exclude: &HashSet<u64>) -> Result<Retrieved> {
        if k == 0 {
            return Ok(Retrieved::default());
        }
        if let Some(cache) = &self.cache {
            if exclude.is_empty() && k <= cache.depth {
                let list = cache.lists.get(&response_id).ok_or(Error::UnknownId(response_id))?;
                let take = &list[..k.min(list.len())];
                return Ok(Retrieved {
                    ids: take.iter().map(|t| t.0).collect(),
                    similarities: take.iter().map(|t| t.1).collect(),
                    rows: take.iter().map(|t| t.2).collect(),
                });
            }
        }
        let r = self.responses.get(response_id)?;
        let hits = self.contexts.top_k(r, k, exclude)?;
        let mut out = Retrieved::default();
        for h in hits {
            out.ids.push(h.id);
            out.similarities.push(h.similarity);
        }
        out.rows = out
            .ids
            .iter()
            .map(|id| self.contexts.position(*id).expect("hit in store"))
            .collect();
        Ok(out)
    }
}

/// Frozen model for scoring.
#[derive(Debug, Clone)]
pub struct Ranker {
    config: ModelConfig,
    params: ParamSet<f32>,
    encoder: ReferenceEncoder,
    head: CompiledHead,
}

impl Ranker {
    pub fn new(config: ModelConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let encoder = ReferenceEncoder::new(config.encoder, &params)?;
        let head = CompiledHead::new(&params, config.dim(), config.comparison, config.head)?;
        Ok(Ranker {
            config,
            params,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn encoder(&self) -> &ReferenceEncoder {
        &self.encoder
    }

    pub fn biencoder_score(&self, context: &[f32], response: &[f32]) -> Result<f32> {
        self.head.biencoder(context, response)
    }

    /// Precomputes the neighbor-side head projections of every stored
    /// context, enabling the fast scoring path for these weights.
    pub fn prepare(&self, stores: &mut Stores) -> Result<()> {
        stores.projections = Some(self.head.project_contexts(&stores.contexts)?);
        Ok(())
    }

    fn prepared<'a>(&self, stores: &'a Stores) -> Option<&'a ContextProjections> {
        stores
            .projections
            .as_ref()
            .filter(|p| p.fingerprint() == self.head.fingerprint() && p.len() == stores.contexts.len())
    }

    /// Enriched score given neighbor vectors; Bi-Encoder score when empty.
    pub fn enriched_score(&self, context: &[f32], response: &[f32], neighbors: &[&[f32]]) -> Result<(f32, EnrichmentTrace)> {
        let (s, attention, gate, pooled) = enrichment::score_with_neighbors(
            context,
            response,
            neighbors,
            &self.params,
            self.config.comparison,
            self.config.head,
        )?;
        let d = context.len();
        let mut trace = EnrichmentTrace {
            attention,
            gate,
            ..Default::default()
        };
        if !pooled.is_empty() {
            trace.enriched = pooled[..d].to_vec();
            trace.gate_control = pooled[d..].to_vec();
        }
        Ok((s, trace))
    }

    /// Scores one cached response against an already-encoded context.
    pub fn score_encoded(
        &self,
        context: &[f32],
        response_id: u64,
        stores: &Stores,
        k: usize,
        exclude: &HashSet<u64>,
    ) -> Result<(f32, EnrichmentTrace)> {
        if context.len() != stores.contexts.dim() {
            return Err(Error::shape("context", &[context.len()], &[stores.contexts.dim()]));
        }
        match self.prepared(stores) {
            Some(proj) => {
                let query = self.head.query(context)?;
                self.score_prepared(&query, response_id, stores, proj, k, exclude)
            }
            None => {
                let response = stores.responses.get(response_id)?;
                let found = stores.neighbors(response_id, k, exclude)?;
                let rows: Vec<&[f32]> = found.rows.iter().map(|&i| stores.contexts.row(i)).collect();
                let (s, mut trace) = self.enriched_score(context, response, &rows)?;
                trace.neighbor_ids = found.ids;
                trace.similarities = found.similarities;
                Ok((s, trace))
            }
        }
    }

    fn score_prepared(
        &self,
        query: &crate::inference::Query,
        response_id: u64,
        stores: &Stores,
        proj: &ContextProjections,
        k: usize,
        exclude: &HashSet<u64>,
    ) -> Result<(f32, EnrichmentTrace)> {
        let response = stores.responses.get(response_id)?;
        let found = stores.neighbors(response_id, k, exclude)?;
        let rows: Vec<&[f32]> = found.rows.iter().map(|&i| stores.contexts.row(i)).collect();
        let projected: Vec<&[f32]> = found.rows.iter().map(|&i| proj.row(i)).collect();
        let (s, attention, gate, pooled) = self.head.score(query, response, &rows, &projected)?;
        let d = self.config.dim();
        let mut trace = EnrichmentTrace {
            neighbor_ids: found.ids,
            similarities: found.similarities,
            attention,
            gate,
            ..Default::default()
        };
        if !pooled.is_empty() {
            trace.enriched = pooled[..d].to_vec();
            trace.gate_control = pooled[d..].to_vec();
        }
        Ok((s, trace))
    }

    /// Full pipeline for a live context: encode, retrieve, score.
    pub fn forward(
        &self,
        context_ids: &[u32],
        response_id: u64,
        stores: &Stores,
        k: usize,
        exclude: &HashSet<u64>,
    ) -> Result<(f32, EnrichmentTrace)> {
        let c = self.encoder.encode(context_ids)?;
        self.score_encoded(&c, response_id, stores, k, exclude)
    }

    /// Scores of every candidate for one live context (one encode).
    pub fn score_candidates(&self, context_ids: &[u32], candidates: &[u64], stores: &Stores, k: usize) -> Result<Vec<f32>> {
        let c = self.encoder.encode(context_ids)?;
        let none = HashSet::new();
        match self.prepared(stores) {
            Some(proj) => {
                let query = self.head.query(&c)?;
                candidates
                    .iter()
                    .map(|id| self.score_prepared(&query, *id, stores, proj, k, &none).map(|(s, _)| s))
                    .collect()
            }
            None => candidates
                .iter()
                .map(|id| self.score_encoded(&c, *id, stores, k, &none).map(|(s, _)| s))
                .collect(),
        }
    }
}
