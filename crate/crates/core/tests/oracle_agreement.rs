//! Randomized agreement between the main paths and the slow oracles.

use p2p_core::bench::fit_line;
use p2p_core::lora::{delta_apply, merge, LoraFactors};
use p2p_core::metrics::{lcs_len, rouge_l, rouge_tokens};
use p2p_core::profile::{output_term_scores, Bm25Index};
use p2p_core::splits::silhouette;
use p2p_core::tensor::Tensor;
use p2p_oracles as oracle;
use proptest::prelude::*;

const WORDS: [&str; 8] = ["apple", "river", "stone", "blue", "quiet", "apple", "run", "x1"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 1..12).prop_map(|ix| ix.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, cols), rows)
}

fn tensor(m: &[Vec<f64>]) -> Tensor {
    Tensor::new(&[m.len(), m[0].len()], m.concat()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn bm25_matches_the_formula(docs in prop::collection::vec(sentence(), 1..8), query in sentence()) {
        let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
        let main = Bm25Index::new(&docs, 1.2, 0.75).scores(&query);
        let want = oracle::bm25_oracle(&query, &refs, 1.2, 0.75);
        prop_assert_eq!(main.len(), want.len());
        for (m, w) in main.iter().zip(&want) {
            prop_assert!(close(*m, *w, 1e-12), "{} vs {}", m, w);
        }
    }

    #[test]
    fn rouge_l_matches_the_table(c in sentence(), r in sentence()) {
        let (ct, rt) = (rouge_tokens(&c), rouge_tokens(&r));
        prop_assert_eq!(lcs_len(&ct, &rt), oracle::lcs_oracle(&ct, &rt));
        prop_assert!(close(rouge_l(&c, &r), oracle::rouge_l_oracle(&ct, &rt), 1e-12));
    }

    #[test]
    fn tfidf_terms_and_scores_agree(outs in prop::collection::vec(sentence(), 1..6)) {
        let refs: Vec<&str> = outs.iter().map(String::as_str).collect();
        let main = output_term_scores(&refs);
        let want = oracle::tfidf_oracle(&refs);
        prop_assert_eq!(main.len(), want.len());
        for ((mt, ms), (wt, ws)) in main.iter().zip(&want) {
            prop_assert_eq!(mt, wt);
            prop_assert!(close(*ms, *ws, 1e-12));
        }
    }

    #[test]
    fn silhouette_agrees(points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3..30), k in 2usize..4) {
        let labels: Vec<usize> = (0..points.len()).map(|i| i % k).collect();
        let main = silhouette(&points, &labels).unwrap();
        let want = oracle::silhouette_oracle(&points, &labels).unwrap();
        prop_assert!(close(main, want, 1e-12), "{} vs {}", main, want);
    }

    #[test]
    fn lora_paths_match_the_dense_update(
        (w0, a, b, x) in (1usize..3, 3usize..9, 3usize..9).prop_flat_map(|(r, d_in, d_out)| {
            (matrix(d_out, d_in), matrix(r, d_in), matrix(d_out, r), prop::collection::vec(-1.0f64..1.0, d_in))
        }),
        alpha in 0.5f64..32.0,
    ) {
        let f = LoraFactors::new(tensor(&a), tensor(&b), alpha).unwrap();
        let w = tensor(&w0);
        let want = oracle::dense_lora_oracle(&w0, &a, &b, alpha, &x).unwrap();
        let delta = delta_apply(&x, &f).unwrap();
        let merged = merge(&w, &f).unwrap();
        for o in 0..w0.len() {
            let plain: f64 = w.row(o).iter().zip(&x).map(|(p, q)| p * q).sum();
            let m: f64 = merged.row(o).iter().zip(&x).map(|(p, q)| p * q).sum();
            prop_assert!(close(plain + delta[o], want[o], 1e-12));
            prop_assert!(close(m, want[o], 1e-12));
        }
    }

    #[test]
    fn line_fit_r2_agrees(ys in prop::collection::vec(-100.0f64..100.0, 3..40)) {
        let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
        let fit = fit_line(&xs, &ys).unwrap();
        prop_assert!(close(fit.r2, oracle::linear_r2_oracle(&xs, &ys), 1e-9));
    }
}
