use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const MAX_RETRIES: usize = 100;

/// Assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub num_classes: usize,
    /// Sorted sample indices of each client.
    pub clients: Vec<Vec<usize>>,
    /// Per-client class counts.
    pub histograms: Vec<Vec<usize>>,
}

impl PartitionPlan {
    fn from_clients(alpha: f64, labels: &[usize], num_classes: usize, mut clients: Vec<Vec<usize>>) -> Self {
        for c in &mut clients {
            c.sort_unstable();
        }
        let histograms = clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; num_classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect();
        PartitionPlan {
            alpha,
            num_classes,
            clients,
            histograms,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Client of every sample; `None` for samples outside the plan.
    pub fn assignment(&self, num_samples: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_samples];
        for (c, idx) in self.clients.iter().enumerate() {
            for &i in idx {
                out[i] = Some(c);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// One `Dirichlet(alpha·1)` draw via normalized Gamma samples.
fn dirichlet<R: Rng + ?Sized>(rng: &mut R, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = p.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        p.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every draw underflowed: all mass on one client
        p.iter_mut().for_each(|v| *v = 0.0);
        p[rng.random_range(0..n)] = 1.0;
    }
    p
}

/// Integer counts summing to `total`, proportional to `p`, by largest
/// remainder (ties to the lower index).
pub(crate) fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_clients<R: Rng + ?Sized>(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    n_clients: usize,
    alpha: f64,
    rng: &mut R,
    min_per_client: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config("data.alpha", "must be positive"));
    }
    if n_clients == 0 {
        return Err(Error::config("round.num_clients", "must be at least 1"));
    }
    if indices.len() < n_clients * min_per_client {
        return Err(Error::Partition(format!(
            "{} samples cannot give {n_clients} clients {min_per_client} samples each",
            indices.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    for _ in 0..MAX_RETRIES {
        let mut clients = vec![Vec::new(); n_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let p = dirichlet(rng, n_clients, alpha);
            let counts = largest_remainder(&p, members.len());
            let mut shuffled = members.clone();
            shuffled.shuffle(rng);
            let mut start = 0;
            for (client, &k) in counts.iter().enumerate() {
                clients[client].extend_from_slice(&shuffled[start..start + k]);
                start += k;
            }
        }
        if clients.iter().all(|c| c.len() >= min_per_client.max(1)) {
            return Ok(clients);
        }
    }
    Err(Error::Partition(format!(
        "no draw gave every client {min_per_client} samples after {MAX_RETRIES} attempts"
    )))
}

/// Label-skew partition: each class is split across clients by an
/// independent `Dirichlet(alpha)` draw, redrawn until every client holds at
/// least `min_per_client` samples.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    n_clients: usize,
    alpha: f64,
    rng: &mut R,
    min_per_client: usize,
) -> Result<PartitionPlan> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let clients = dirichlet_clients(&all, labels, num_classes, n_clients, alpha, rng, min_per_client)?;
    Ok(PartitionPlan::from_clients(alpha, labels, num_classes, clients))
}

/// Concept-skew partition: domain `d` is Dirichlet-split among clients
/// `d·k .. (d+1)·k` only.
pub fn domain_partition<R: Rng + ?Sized>(
    dataset: &Dataset,
    clients_per_domain: usize,
    alpha: f64,
    rng: &mut R,
    min_per_client: usize,
) -> Result<PartitionPlan> {
    let domains = dataset
        .domains
        .as_ref()
        .ok_or_else(|| Error::Data("domain partition needs domain-tagged data".into()))?;
    let mut clients = Vec::new();
    for d in 0..dataset.domain_count() {
        let idx: Vec<usize> = (0..dataset.len()).filter(|&i| domains[i] == d).collect();
        if idx.is_empty() {
            return Err(Error::Partition(format!("domain {d} has no samples")));
        }
        clients.extend(dirichlet_clients(
            &idx,
            &dataset.labels,
            dataset.num_classes,
            clients_per_domain,
            alpha,
            rng,
            min_per_client,
        )?);
    }
    Ok(PartitionPlan::from_clients(
        alpha,
        &dataset.labels,
        dataset.num_classes,
        clients,
    ))
}

/// Train and test data of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Split every client's samples into train and test, stratified by class.
///
/// The test size is `round(test_fraction·n)` clamped to `[1, n-1]` and is
/// shared between classes by largest remainder.
pub fn split_per_client<R: Rng + ?Sized>(
    plan: &PartitionPlan,
    dataset: &Dataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("data.test_fraction", "must lie strictly between 0 and 1"));
    }
    let mut shards = Vec::with_capacity(plan.num_clients());
    for (c, idx) in plan.clients.iter().enumerate() {
        let n = idx.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "client {c} has {n} samples; a split needs at least 2"
            )));
        }
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
        for &i in idx {
            by_class[dataset.labels[i]].push(i);
        }
        let weights: Vec<f64> = by_class.iter().map(|m| m.len() as f64 / n as f64).collect();
        let quota = largest_remainder(&weights, n_test);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (members, &q) in by_class.iter_mut().zip(&quota) {
            members.shuffle(rng);
            test.extend_from_slice(&members[..q]);
            train.extend_from_slice(&members[q..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        shards.push(ClientShard {
            train: dataset.subset(&train),
            test: dataset.subset(&test),
            train_indices: train,
            test_indices: test,
        });
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn largest_remainder_by_hand() {
        assert_eq!(largest_remainder(&[0.5, 0.3, 0.2], 7), vec![4, 2, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 5), vec![0, 5]);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let plan = dirichlet_partition(&labels, 4, 1, 0.1, &mut ChaCha8Rng::seed_from_u64(0), 4).unwrap();
        assert_eq!(plan.clients, vec![(0..20).collect::<Vec<_>>()]);
    }

    #[test]
    fn infeasible_minimum_is_partition_error() {
        let labels = vec![0; 10];
        let err = dirichlet_partition(&labels, 1, 4, 0.1, &mut ChaCha8Rng::seed_from_u64(0), 4).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }

    #[test]
    fn huge_alpha_is_near_uniform() {
        let labels: Vec<usize> = (0..4000).map(|i| i % 4).collect();
        let plan = dirichlet_partition(&labels, 4, 4, 1e6, &mut ChaCha8Rng::seed_from_u64(3), 4).unwrap();
        for h in &plan.histograms {
            for &c in h {
                assert!((c as f64 - 250.0).abs() <= 25.0, "{h:?}");
            }
        }
    }
}
