use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::shard::{Shard, ShardInfo};
use crate::store::{FullVectorStore, Matrix};
use crate::transport::{BandwidthMeter, LocalLink, Request, Response, ShardLink, TcpLink};

/// Rows fetched per export call.
const EXPORT_CHUNK: u32 = 4096;

/// Connections to all `S` shards of one layout, in shard order, sharing one
/// traffic meter. Safe to use from many client threads at once.
pub struct ShardSet {
    links: Vec<Box<dyn ShardLink>>,
    infos: Vec<ShardInfo>,
    meter: Arc<BandwidthMeter>,
}

impl ShardSet {
    /// Wraps already-open links after checking they form one layout.
    pub fn from_links(links: Vec<Box<dyn ShardLink>>, meter: Arc<BandwidthMeter>) -> Result<Self> {
        let infos: Vec<ShardInfo> = links.iter().map(|l| l.info()).collect();
        check_layout(&infos)?;
        Ok(ShardSet {
            links,
            infos,
            meter,
        })
    }

    /// In-process shards reached through encoded frames.
    pub fn local(shards: &[Arc<Shard>], meter: Arc<BandwidthMeter>) -> Result<Self> {
        let links = shards
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Box::new(LocalLink::new(i, Arc::clone(s), Arc::clone(&meter))) as Box<dyn ShardLink>
            })
            .collect();
        Self::from_links(links, meter)
    }

    /// Connects to every endpoint; endpoint `i` must serve shard `i`.
    pub fn connect(
        endpoints: &[String],
        timeout: Duration,
        meter: Arc<BandwidthMeter>,
    ) -> Result<Self> {
        let mut links: Vec<Box<dyn ShardLink>> = Vec::with_capacity(endpoints.len());
        for (i, ep) in endpoints.iter().enumerate() {
            links.push(Box::new(TcpLink::connect(
                ep.as_str(),
                i,
                Arc::clone(&meter),
                timeout,
            )?));
        }
        Self::from_links(links, meter)
    }

    pub fn links(&self) -> &[Box<dyn ShardLink>] {
        &self.links
    }

    pub fn meter(&self) -> &Arc<BandwidthMeter> {
        &self.meter
    }

    pub fn num_shards(&self) -> usize {
        self.links.len()
    }

    pub fn dim(&self) -> usize {
        self.infos[0].dim as usize
    }

    pub fn vocab_size(&self) -> usize {
        self.infos[0].vocab_size as usize
    }

    pub fn infos(&self) -> &[ShardInfo] {
        &self.infos
    }

    /// Pulls both matrices from every shard and assembles full vectors.
    pub fn export(&self) -> Result<FullVectorStore> {
        let vocab = self.vocab_size() as u32;
        let mut full = FullVectorStore::zeros(vocab as usize, self.dim());
        for (link, info) in self.links.iter().zip(&self.infos) {
            let columns = info.lo as usize..info.hi as usize;
            for matrix in [Matrix::Input, Matrix::Output] {
                let mut start = 0;
                while start < vocab {
                    let count = EXPORT_CHUNK.min(vocab - start);
                    let reply = link.call(&Request::Export {
                        matrix,
                        start,
                        count,
                    })?;
                    let Response::Export { width, values, .. } = reply.response else {
                        return Err(Error::Protocol("expected export response".into()));
                    };
                    if width as usize != columns.len() {
                        return Err(Error::Protocol(format!(
                            "shard {} exported width {width}, expected {}",
                            info.shard_id,
                            columns.len()
                        )));
                    }
                    let rows: Vec<(u32, Vec<f32>)> = values
                        .chunks_exact(columns.len().max(1))
                        .take(count as usize)
                        .enumerate()
                        .map(|(i, r)| (start + i as u32, r.to_vec()))
                        .collect();
                    full.place_partials(columns.clone(), matrix, &rows)?;
                    start += count;
                }
            }
        }
        Ok(full)
    }

    /// Asks every shard to stop. Failures are logged and skipped.
    pub fn shutdown_all(&self) {
        for (i, link) in self.links.iter().enumerate() {
            if let Err(e) = link.call(&Request::Shutdown) {
                log::warn!("shard {i} shutdown: {e}");
            }
        }
    }
}

fn check_layout(infos: &[ShardInfo]) -> Result<()> {
    let first = infos
        .first()
        .ok_or_else(|| Error::Config("no shards".into()))?;
    let mut next_lo = 0;
    for (i, info) in infos.iter().enumerate() {
        let bad = |what: &str| {
            Err(Error::Config(format!(
                "shard at position {i}: {what} ({info:?})"
            )))
        };
        if info.shard_id as usize != i {
            return bad("shard id does not match its position");
        }
        if info.num_shards as usize != infos.len() {
            return bad("shard count disagrees with endpoint list");
        }
        if info.dim != first.dim || info.vocab_size != first.vocab_size {
            return bad("dimension or vocabulary size disagrees with shard 0");
        }
        if info.lo != next_lo || info.hi <= info.lo {
            return bad("column range does not continue the previous shard");
        }
        next_lo = info.hi;
    }
    if next_lo != first.dim {
        return Err(Error::Config(format!(
            "column ranges cover {next_lo} of {} columns",
            first.dim
        )));
    }
    Ok(())
}
