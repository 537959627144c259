//! Decoder algebra measurements shared by the integration and acceptance tests.

use escounts::decoder::{
    ca_block, density_head, prepare_exemplar, prepare_video, self_attention, wsa_block, Bound, Decoder,
    DecoderConfig, DecoderParams,
};
use escounts::numerics::{Tape, Tensor, Var};

use super::{random_exemplar, random_sequence, tiny_config};

pub fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn ca_output(cfg: &DecoderConfig, params: &DecoderParams<f32>, z: &Tensor<f32>, ex: &[Tensor<f32>]) -> Vec<f32> {
    let mut tape = Tape::<f32>::new();
    let p = params.bind_frozen(&mut tape);
    let zv = tape.constant(z.clone());
    let ev: Vec<Var> = ex.iter().map(|e| tape.constant(e.clone())).collect();
    let out = ca_block(&mut tape, cfg, &p, 0, zv, &ev).unwrap();
    tape.value(out).data().to_vec()
}

/// Largest change from permuting three exemplars: `(ca_block, full decoder)`.
pub fn permutation_diff() -> (f32, f32) {
    let cfg = tiny_config();
    let dec = Decoder::new(cfg.clone(), 7).unwrap();
    let seq = random_sequence(&cfg, 2, 1);
    let ex: Vec<_> = (0..3).map(|s| random_exemplar(&cfg, 20 + s)).collect();
    let z = prepare_video(&cfg, &seq).unwrap();
    let e: Vec<_> = ex.iter().map(|x| prepare_exemplar(&cfg, x).unwrap()).collect();
    let a = ca_output(&cfg, &dec.params, &z, &e);
    let b = ca_output(&cfg, &dec.params, &z, &[e[2].clone(), e[0].clone(), e[1].clone()]);
    let da = dec.density(&seq, &ex).unwrap();
    let db = dec.density(&seq, &[ex[1].clone(), ex[2].clone(), ex[0].clone()]).unwrap();
    (max_diff(&a, &b), max_diff(&da, &db))
}

/// Largest difference between one exemplar and the same exemplar three times.
pub fn duplicate_diff() -> f32 {
    let cfg = tiny_config();
    let dec = Decoder::new(cfg.clone(), 8).unwrap();
    let seq = random_sequence(&cfg, 2, 2);
    let e = random_exemplar(&cfg, 30);
    let one = dec.density(&seq, std::slice::from_ref(&e)).unwrap();
    let three = dec.density(&seq, &[e.clone(), e.clone(), e]).unwrap();
    max_diff(&one, &three)
}

/// One WSA block written out with global attention.
fn global_block(tape: &mut Tape<f32>, cfg: &DecoderConfig, p: &Bound, l: usize, z: Var) -> Var {
    let v = |n: &str| p.var(&format!("wsa.{l}.{n}")).unwrap();
    let n1 = tape.layer_norm(z, v("ln1.gain"), v("ln1.bias")).unwrap();
    let a = self_attention(tape, cfg, p, &format!("wsa.{l}.attn"), n1).unwrap();
    let z1 = tape.add(a, z).unwrap();
    let n2 = tape.layer_norm(z1, v("ln2.gain"), v("ln2.bias")).unwrap();
    let h = tape.matmul(n2, v("mlp.w1")).unwrap();
    let h = tape.add_row(h, v("mlp.b1")).unwrap();
    let h = tape.gelu(h).unwrap();
    let h = tape.matmul(h, v("mlp.w2")).unwrap();
    let h = tape.add_row(h, v("mlp.b2")).unwrap();
    tape.add(h, z1).unwrap()
}

/// Worst difference between a full-grid WSA block and global SA, over
/// unshifted and shifted layers and two sequence lengths.
pub fn full_window_diff() -> f32 {
    let mut worst: f32 = 0.0;
    for windows in [1, 2] {
        let base = tiny_config();
        let t = windows * base.tokens_per_window;
        let cfg = DecoderConfig { window: (t, base.height, base.width), wsa_blocks: 2, ..base };
        let dec = Decoder::new(cfg.clone(), 9).unwrap();
        let seq = random_sequence(&cfg, windows, 3);
        for l in 0..2 {
            let mut tape = Tape::<f32>::new();
            let p = dec.params.bind_frozen(&mut tape);
            let z = tape.constant(prepare_video(&cfg, &seq).unwrap());
            let w = wsa_block(&mut tape, &cfg, &p, l, z, seq.grid).unwrap();
            let g = global_block(&mut tape, &cfg, &p, l, z);
            worst = worst.max(max_diff(tape.value(w).data(), tape.value(g).data()));
        }
    }
    worst
}

/// Runs CA, WSA and the head for three sequence lengths; returns the `M`
/// values whose shapes were all preserved.
pub fn preserved_shapes() -> Vec<usize> {
    let cfg = tiny_config();
    let dec = Decoder::new(cfg.clone(), 10).unwrap();
    let mut ok = Vec::new();
    for windows in [3, 6, 12] {
        let seq = random_sequence(&cfg, windows, 4);
        let m = seq.grid.tokens();
        let mut tape = Tape::<f32>::new();
        let p = dec.params.bind_frozen(&mut tape);
        let z = tape.constant(prepare_video(&cfg, &seq).unwrap());
        let e = tape.constant(prepare_exemplar(&cfg, &random_exemplar(&cfg, 5)).unwrap());
        let c = ca_block(&mut tape, &cfg, &p, 0, z, &[e]).unwrap();
        let w0 = wsa_block(&mut tape, &cfg, &p, 0, c, seq.grid).unwrap();
        let w1 = wsa_block(&mut tape, &cfg, &p, 1.min(cfg.wsa_blocks - 1), w0, seq.grid).unwrap();
        let d = density_head(&mut tape, &cfg, &p, w1, seq.grid).unwrap();
        let expect = [m, cfg.channels];
        if tape.shape(c) == expect && tape.shape(w0) == expect && tape.shape(w1) == expect && tape.shape(d) == [seq.grid.t] {
            ok.push(m);
        }
    }
    ok
}
