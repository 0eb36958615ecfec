use std::collections::BTreeSet;

use crate::mask::{build_mask_matrix, EncoderPolicy, MaskMatrix, MaskSpec, Stage};

fn expand(set: &BTreeSet<usize>, mask: &MaskMatrix, local: &[usize]) -> BTreeSet<usize> {
    let mut out = set.clone();
    for &p in set {
        out.extend(mask.global_row(local[p]));
    }
    out
}

fn local_index(mask: &MaskMatrix, total: usize) -> Vec<usize> {
    let mut local = vec![usize::MAX; total];
    for (r, &p) in mask.positions().iter().enumerate() {
        local[p] = r;
    }
    local
}

/// Encoder inputs (cls tokens and visible beats) that can influence the
/// decoder output at `target`, following allow sets backwards through every
/// decoder layer, the scaffold (masked positions are leaves) and every
/// encoder layer.
pub fn influencing_inputs(
    spec: &MaskSpec,
    policy: EncoderPolicy,
    enc_layers: usize,
    dec_layers: usize,
    target: usize,
) -> BTreeSet<usize> {
    let total = spec.layout.total();
    let enc = build_mask_matrix(spec, Stage::Encoder, policy);
    let dec = build_mask_matrix(spec, Stage::Decoder, policy);
    let enc_local = local_index(&enc, total);
    let dec_local = local_index(&dec, total);
    assert!(dec_local[target] != usize::MAX, "target must be an active position");

    let mut set = BTreeSet::from([target]);
    for _ in 0..dec_layers {
        set = expand(&set, &dec, &dec_local);
    }
    set.retain(|&p| !spec.is_masked(p));
    for _ in 0..enc_layers {
        set = expand(&set, &enc, &enc_local);
    }
    set
}
