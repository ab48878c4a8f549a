//! Monte Carlo phase-transition grids over (subspace dimension, sample count).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dae::Parameterization;
use crate::error::{invalid, Result};
use crate::experiments::output::fmt_f64;
use crate::experiments::seed::derive_seed;
use crate::molrg::MoLRGModel;
use crate::optim::oracle::{ksubspaces_oracle, pca_oracle_adversarial};
use crate::optim::recovery::{match_and_score, SUCCESS_THRESHOLD};
use crate::optim::sgd::{sgd_train, TrainConfig};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pca,
    Sgd,
    KSubspaces,
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(Self::Pca),
            "sgd" => Ok(Self::Sgd),
            "ksubspaces" | "k-subspaces" | "ksub" => Ok(Self::KSubspaces),
            _ => Err(invalid(format!("unknown method {s:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pca => "pca",
            Self::Sgd => "sgd",
            Self::KSubspaces => "ksubspaces",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelFamily {
    pub k: usize,
    pub n: usize,
    pub orth: bool,
}

/// Everything besides the grid axes that a trial needs.
#[derive(Debug, Clone)]
pub struct PhaseSettings {
    pub family: ModelFamily,
    pub method: Method,
    pub trials: usize,
    pub noise: f64,
    pub master_seed: u64,
    /// K-subspaces random restarts.
    pub restarts: usize,
    pub schedule: Schedule,
    /// SGD settings; `None` selects the defaults for the model family.
    pub train: Option<TrainConfig>,
    /// Worker cap; 0 lets the thread pool decide.
    pub threads: usize,
}

impl PhaseSettings {
    pub fn new(family: ModelFamily, method: Method, trials: usize, master_seed: u64) -> Self {
        Self {
            family,
            method,
            trials,
            noise: 0.0,
            master_seed,
            restarts: 10,
            schedule: Schedule::default(),
            train: None,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    pub d_values: Vec<usize>,
    /// Sample counts: total `N` when `K = 1`, per-component `N_k` otherwise.
    pub n_values: Vec<usize>,
    pub trials: usize,
    pub method: Method,
    pub successes: Vec<Vec<usize>>,
    /// `rates[i][j]` for `d_values[i]`, `n_values[j]`.
    pub rates: Vec<Vec<f64>>,
    pub master_seed: u64,
}

/// Runs `f` on a dedicated pool of `threads` workers (0 lets rayon decide).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs one trial and reports whether the subspaces were recovered.
pub fn run_trial(settings: &PhaseSettings, d: usize, count: usize, trial: usize) -> Result<bool> {
    let fam = settings.family;
    let seed = derive_seed(settings.master_seed, d as u64, count as u64, trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = vec![d; fam.k];
    let model = MoLRGModel::random(&mut rng, fam.n, &dims, fam.orth)?;
    let data = if fam.k == 1 {
        model.sample_dataset(&mut rng, count, settings.noise)?
    } else {
        model.sample_dataset_balanced(&mut rng, count, settings.noise)?
    };
    let learned: Vec<DMatrix<f64>> = match settings.method {
        Method::Pca => {
            if fam.k != 1 {
                return Err(invalid("the PCA oracle handles a single subspace"));
            }
            vec![pca_oracle_adversarial(&data.samples, d, &model.bases()[0])?]
        }
        Method::KSubspaces => {
            ksubspaces_oracle(&data.samples, fam.k, d, settings.restarts, &mut rng, None)?
                .params
                .into_bases()
        }
        Method::Sgd => {
            let (kind, mut cfg, init) = if fam.k == 1 {
                (Parameterization::Single, TrainConfig::single_defaults(count), None)
            } else {
                (Parameterization::Softmax, TrainConfig::mixture_defaults(), Some(&model))
            };
            if let Some(c) = &settings.train {
                cfg = c.clone();
            }
            cfg.seed = derive_seed(seed, 0, 0, 1);
            sgd_train(&data, &settings.schedule, &cfg, init, &dims, kind)?.params.into_bases()
        }
    };
    Ok(match_and_score(&learned, model.bases(), SUCCESS_THRESHOLD)?.success)
}

/// Success rates over the grid. Results depend only on the settings, not on the worker count.
pub fn phase_grid(d_values: &[usize], n_values: &[usize], settings: &PhaseSettings) -> Result<PhaseGrid> {
    if d_values.is_empty() || n_values.is_empty() || settings.trials == 0 {
        return Err(invalid("phase grid needs nonempty ranges and at least one trial"));
    }
    let jobs: Vec<(usize, usize, usize)> = (0..d_values.len())
        .flat_map(|i| (0..n_values.len()).flat_map(move |j| (0..settings.trials).map(move |t| (i, j, t))))
        .collect();
    let outcomes: Vec<bool> = with_threads(settings.threads, || {
        jobs.par_iter()
            .map(|&(i, j, t)| run_trial(settings, d_values[i], n_values[j], t))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut successes = vec![vec![0usize; n_values.len()]; d_values.len()];
    for (&(i, j, _), ok) in jobs.iter().zip(outcomes) {
        successes[i][j] += ok as usize;
    }
    let rates = successes
        .iter()
        .map(|row| row.iter().map(|&s| s as f64 / settings.trials as f64).collect())
        .collect();
    Ok(PhaseGrid {
        d_values: d_values.to_vec(),
        n_values: n_values.to_vec(),
        trials: settings.trials,
        method: settings.method,
        successes,
        rates,
        master_seed: settings.master_seed,
    })
}

impl PhaseGrid {
    pub fn rate(&self, d: usize, count: usize) -> Option<f64> {
        let i = self.d_values.iter().position(|&v| v == d)?;
        let j = self.n_values.iter().position(|&v| v == count)?;
        Some(self.rates[i][j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,N,trials,successes,rate\n");
        for (i, &d) in self.d_values.iter().enumerate() {
            for (j, &count) in self.n_values.iter().enumerate() {
                out.push_str(&format!(
                    "{d},{count},{},{},{}\n",
                    self.trials,
                    self.successes[i][j],
                    fmt_f64(self.rates[i][j])
                ));
            }
        }
        out
    }

    /// Grayscale heatmap: white for rate 1, black for rate 0; larger `d` at the top.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 32;
        const LEFT: usize = 70;
        const TOP: usize = 20;
        const BOTTOM: usize = 60;
        let cols = self.n_values.len();
        let rows = self.d_values.len();
        let width = LEFT + cols * CELL + 20;
        let height = TOP + rows * CELL + BOTTOM;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
             viewBox=\"0 0 {width} {height}\" style=\"font-family:sans-serif;font-size:12px\">\n"
        );
        s.push_str(&format!("<rect width=\"{width}\" height=\"{height}\" style=\"fill:#ffffff\"/>\n"));
        for (i, &d) in self.d_values.iter().enumerate() {
            let y = TOP + (rows - 1 - i) * CELL;
            for j in 0..cols {
                let v = (255.0 * self.rates[i][j]).round() as u8;
                s.push_str(&format!(
                    "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" style=\"fill:rgb({v},{v},{v});stroke:#808080;stroke-width:0.5\"/>\n",
                    LEFT + j * CELL
                ));
            }
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" style=\"text-anchor:end\">{d}</text>\n",
                LEFT - 6,
                y + CELL / 2 + 4
            ));
        }
        for (j, &count) in self.n_values.iter().enumerate() {
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" style=\"text-anchor:middle\">{count}</text>\n",
                LEFT + j * CELL + CELL / 2,
                TOP + rows * CELL + 16
            ));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" style=\"text-anchor:middle\">number of training samples</text>\n",
            LEFT + cols * CELL / 2,
            TOP + rows * CELL + 44
        ));
        let cy = TOP + rows * CELL / 2;
        s.push_str(&format!(
            "<text x=\"20\" y=\"{cy}\" transform=\"rotate(-90 20 {cy})\" style=\"text-anchor:middle\">dimension of subspaces</text>\n"
        ));
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pca(trials: usize, seed: u64) -> PhaseSettings {
        PhaseSettings::new(ModelFamily { k: 1, n: 48, orth: true }, Method::Pca, trials, seed)
    }

    #[test]
    fn trivial_cell_succeeds() {
        let g = phase_grid(&[1], &[1], &pca(5, 0)).unwrap();
        assert_eq!(g.rates, vec![vec![1.0]]);
    }

    #[test]
    fn pca_dichotomy_on_a_small_grid() {
        let ds = [2, 4, 6];
        let ns: Vec<usize> = (2..=8).collect();
        let g = phase_grid(&ds, &ns, &pca(5, 11)).unwrap();
        for &d in &ds {
            for &count in &ns {
                let r = g.rate(d, count).unwrap();
                if count >= d {
                    assert_eq!(r, 1.0, "d={d} N={count}");
                } else if count + 2 <= d {
                    assert_eq!(r, 0.0, "d={d} N={count}");
                }
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut a = pca(3, 5);
        a.threads = 1;
        let mut b = a.clone();
        b.threads = 3;
        let ga = phase_grid(&[2, 3], &[1, 2, 3], &a).unwrap();
        let gb = phase_grid(&[2, 3], &[1, 2, 3], &b).unwrap();
        assert_eq!(ga.to_csv(), gb.to_csv());
    }

    #[test]
    fn csv_and_svg_shapes() {
        let g = phase_grid(&[2, 3], &[2, 4], &pca(2, 1)).unwrap();
        let csv = g.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("d,N,trials,successes,rate\n2,2,2,"));
        let svg = g.to_svg();
        assert!(svg.contains("number of training samples"));
        assert!(svg.contains("dimension of subspaces"));
        assert_eq!(svg.matches("rgb(").count(), 4);
    }

    #[test]
    fn empty_ranges_are_rejected() {
        assert!(phase_grid(&[], &[2], &pca(1, 0)).is_err());
        assert!(phase_grid(&[2], &[2], &pca(0, 0)).is_err());
    }

    #[test]
    fn ksubspaces_recovers_with_plenty_of_samples() {
        let s = PhaseSettings::new(ModelFamily { k: 2, n: 24, orth: true }, Method::KSubspaces, 4, 3);
        let g = phase_grid(&[2], &[8], &s).unwrap();
        assert_eq!(g.rates[0][0], 1.0);
    }
}
