//! Content hashes of model inputs.

use sha2::{Digest, Sha256};

use crate::geometry::SiteTable;
use crate::temporal::ObservationSet;

/// SHA-256 over a canonical byte encoding of the sites and observations.
/// Floats are hashed by bit pattern, so the hash changes with any edit.
pub fn data_fingerprint(sites: &SiteTable, obs: &ObservationSet) -> String {
    let mut h = Sha256::new();
    h.update(b"sites\0");
    for name in &sites.covariate_names {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    let mut ordered: Vec<_> = sites.sites.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    for s in ordered {
        h.update(s.id.as_bytes());
        h.update([0u8]);
        h.update(s.coord.x.to_bits().to_le_bytes());
        h.update(s.coord.y.to_bits().to_le_bytes());
        h.update(s.kind.as_str().as_bytes());
        for v in &s.covariates {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.update(b"obs\0");
    h.update(obs.anchor.to_string().as_bytes());
    for r in obs.records() {
        h.update(r.site_id.as_bytes());
        h.update([0u8]);
        h.update((r.period as u64).to_le_bytes());
        h.update(r.value.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}
