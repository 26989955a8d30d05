use crate::autodiff::{ParamStore, Tensor};
use crate::data::Dataset;

use super::{ItemIndex, ModelConfig, ModelError, Ranker};

const POP: &str = "pop.counts";
const MARKOV: &str = "markov.counts";

fn count_pop(seqs: &[Vec<u32>], n: usize) -> Tensor {
    let mut counts = vec![0.0; n];
    for t in seqs.iter().flatten() {
        counts[*t as usize - 1] += 1.0;
    }
    Tensor::new(vec![1, n], counts).expect("1 x n")
}

fn encode_train(train: &Dataset) -> Result<(ItemIndex, Vec<Vec<u32>>), ModelError> {
    let index = ItemIndex::from_vocab(&train.vocab)?;
    let seqs = index.encode_dataset(train)?;
    if seqs.iter().all(Vec::is_empty) {
        return Err(ModelError::Empty("training split has no purchases".into()));
    }
    Ok((index, seqs))
}

/// Purchase counts over every position of the training split.
pub fn pop_fit(train: &Dataset) -> Result<Ranker, ModelError> {
    let (index, seqs) = encode_train(train)?;
    let mut params = ParamStore::default();
    params.insert(POP, count_pop(&seqs, index.n_items()));
    Ok(Ranker {
        config: ModelConfig::Pop,
        index,
        l_max: 1,
        params,
    })
}

/// First-order transition counts `C[i][j]` over adjacent pairs within
/// sessions, plus the popularity counts used for fallbacks.
pub fn markov_fit(train: &Dataset) -> Result<Ranker, ModelError> {
    let (index, seqs) = encode_train(train)?;
    let n = index.n_items();
    let mut counts = vec![0.0; n * n];
    for s in &seqs {
        for w in s.windows(2) {
            counts[(w[0] as usize - 1) * n + w[1] as usize - 1] += 1.0;
        }
    }
    let mut params = ParamStore::default();
    params.insert(POP, count_pop(&seqs, n));
    params.insert(MARKOV, Tensor::new(vec![n, n], counts).expect("n x n"));
    Ok(Ranker {
        config: ModelConfig::Markov,
        index,
        l_max: 1,
        params,
    })
}

fn tensor<'a>(r: &'a Ranker, name: &str) -> &'a Tensor {
    r.params.get(r.params.find(name).expect("baseline tensor present"))
}

/// Row `i - 1` of the transition matrix normalised to probabilities, or
/// `None` when token `i` never preceded anything.
pub(crate) fn transition_row(r: &Ranker, last: u32) -> Option<Vec<f64>> {
    let row = tensor(r, MARKOV).row(last as usize - 1);
    let total: f64 = row.iter().sum();
    (total > 0.0).then(|| row.iter().map(|c| c / total).collect())
}

/// POP: raw counts. Markov: transition probabilities of the last item;
/// zero-probability items score in `[-1, 0)` by popularity so they follow
/// every positive item in popularity order; an unseen predecessor falls
/// back to the POP scores.
pub(crate) fn scores(r: &Ranker, prefix: &[u32]) -> Vec<f64> {
    let pop = tensor(r, POP).data();
    if r.config == ModelConfig::Pop {
        return pop.to_vec();
    }
    let last = *prefix.last().expect("non-empty prefix");
    match transition_row(r, last) {
        None => pop.to_vec(),
        Some(probs) => {
            let max_pop = pop.iter().cloned().fold(0.0, f64::max);
            probs
                .iter()
                .zip(pop)
                .map(|(&p, &c)| if p > 0.0 { p } else { -1.0 + c / (max_pop + 1.0) })
                .collect()
        }
    }
}
