//! Extractive baseline: pick the comments closest to the thread centroid.

use ndarray::Array1;

use crate::corpus::CleanThread;
use crate::model::Mat;
use crate::tokenizer::Vocab;

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Indices (0-based, ascending) of the `k` vectors most cosine-similar to
/// their mean. Ties go to the earlier vector; a zero vector scores 0.
pub fn centroid_select(vectors: &[Array1<f64>], k: usize) -> Vec<usize> {
    let Some(first) = vectors.first() else {
        return Vec::new();
    };
    let mut centroid = Array1::zeros(first.len());
    for v in vectors {
        centroid += v;
    }
    centroid /= vectors.len() as f64;
    let sims: Vec<f64> = vectors.iter().map(|v| cosine(v, &centroid)).collect();
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Mean of the token embedding rows of `text`; zero when it has no tokens.
pub fn comment_embedding(text: &str, vocab: &Vocab, embed: &Mat) -> Array1<f64> {
    let ids = vocab.encode_text(text);
    let mut v = Array1::zeros(embed.ncols());
    for &id in &ids {
        v += &embed.row(id as usize);
    }
    if !ids.is_empty() {
        v /= ids.len() as f64;
    }
    v
}

/// The `k` comments nearest the centroid, in thread order.
pub fn centroid_baseline(thread: &CleanThread, vocab: &Vocab, embed: &Mat, k: usize) -> Vec<String> {
    let vectors: Vec<Array1<f64>> = thread
        .comments
        .iter()
        .map(|c| comment_embedding(&c.text, vocab, embed))
        .collect();
    centroid_select(&vectors, k)
        .into_iter()
        .map(|i| thread.comments[i].text.clone())
        .collect()
}
