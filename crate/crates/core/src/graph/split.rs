use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GraphBundle;
use crate::error::{Error, Result};

/// Disjoint specialist training sets plus matching evaluation sets.
///
/// Group-1 classes send `floor(ratio * n_c)` of their nodes to A and the
/// rest to B; group-2 classes do the opposite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistSplit {
    pub num_nodes: usize,
    pub class_group: Vec<u8>,
    pub ratio: f64,
    pub seed: u64,
    pub a_train: Vec<u32>,
    pub b_train: Vec<u32>,
    pub a_eval: Vec<u32>,
    pub b_eval: Vec<u32>,
}

impl SpecialistSplit {
    pub fn mask(&self, nodes: &[u32]) -> Vec<bool> {
        let mut m = vec![false; self.num_nodes];
        for &v in nodes {
            m[v as usize] = true;
        }
        m
    }

    pub fn mask_a_train(&self) -> Vec<bool> {
        self.mask(&self.a_train)
    }

    pub fn mask_b_train(&self) -> Vec<bool> {
        self.mask(&self.b_train)
    }

    pub fn mask_a_eval(&self) -> Vec<bool> {
        self.mask(&self.a_eval)
    }

    pub fn mask_b_eval(&self) -> Vec<bool> {
        self.mask(&self.b_eval)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        crate::binio::read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::binio::write_json(path.as_ref(), self)
    }
}

/// Lower half of the class ids form group 1, the upper half group 2.
pub fn default_class_groups(num_classes: usize) -> Vec<u8> {
    let cut = num_classes.div_ceil(2);
    (0..num_classes).map(|c| if c < cut { 1 } else { 2 }).collect()
}

/// Parses `"0-3:4-6"` (group 1 before the colon, group 2 after; items are
/// comma-separated ids or inclusive ranges). `"default"` halves the ids.
pub fn parse_class_groups(spec: &str, num_classes: usize) -> Result<Vec<u8>> {
    if spec.trim() == "default" {
        return Ok(default_class_groups(num_classes));
    }
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 2 {
        return Err(Error::invalid(format!(
            "class groups `{spec}`: expected GROUP1:GROUP2"
        )));
    }
    let mut groups = vec![0u8; num_classes];
    for (g, part) in parts.iter().enumerate() {
        for item in part.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (lo, hi) = match item.split_once('-') {
                Some((a, b)) => (a.trim(), b.trim()),
                None => (item, item),
            };
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::invalid(format!("class groups: bad class id `{s}`")))
            };
            let (lo, hi) = (parse(lo)?, parse(hi)?);
            for c in lo..=hi {
                if c >= num_classes {
                    return Err(Error::invalid(format!(
                        "class groups: class {c} outside 0..{num_classes}"
                    )));
                }
                groups[c] = g as u8 + 1;
            }
        }
    }
    if let Some(c) = groups.iter().position(|&g| g == 0) {
        return Err(Error::invalid(format!("class groups: class {c} has no group")));
    }
    Ok(groups)
}

pub fn build_specialist_split(
    bundle: &GraphBundle,
    class_group: &[u8],
    ratio: f64,
    seed: u64,
) -> Result<SpecialistSplit> {
    let k = bundle.num_classes();
    if class_group.len() != k || class_group.iter().any(|&g| g != 1 && g != 2) {
        return Err(Error::invalid(
            "every class needs a group id of 1 or 2",
        ));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("ratio {ratio} outside (0,1)")));
    }
    let train = bundle
        .mask("train")
        .ok_or_else(|| Error::invalid("bundle has no `train` mask"))?;
    let test = bundle
        .mask("test")
        .ok_or_else(|| Error::invalid("bundle has no `test` mask"))?;
    let labels = bundle.labels();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a_train, b_train) = allocate(train, labels, class_group, ratio, &mut rng, "train");
    let (a_eval, b_eval) = allocate(test, labels, class_group, ratio, &mut rng, "test");
    Ok(SpecialistSplit {
        num_nodes: bundle.num_nodes(),
        class_group: class_group.to_vec(),
        ratio,
        seed,
        a_train,
        b_train,
        a_eval,
        b_eval,
    })
}

fn allocate(
    mask: &[bool],
    labels: &[u16],
    class_group: &[u8],
    ratio: f64,
    rng: &mut ChaCha8Rng,
    what: &str,
) -> (Vec<u32>, Vec<u32>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (class, &group) in class_group.iter().enumerate() {
        let mut nodes: Vec<u32> = (0..mask.len())
            .filter(|&v| mask[v] && labels[v] as usize == class)
            .map(|v| v as u32)
            .collect();
        if nodes.is_empty() {
            log::warn!("class {class} has no nodes in the {what} mask");
            continue;
        }
        nodes.shuffle(rng);
        let major = (ratio * nodes.len() as f64).floor() as usize;
        let (head, tail) = nodes.split_at(major);
        if group == 1 {
            a.extend_from_slice(head);
            b.extend_from_slice(tail);
        } else {
            b.extend_from_slice(head);
            a.extend_from_slice(tail);
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Csr;
    use ndarray::Array2;

    fn bundle(labels: Vec<u16>, k: usize, train: Vec<bool>, test: Vec<bool>) -> GraphBundle {
        let n = labels.len();
        let csr = Csr::from_edges(n, &[]).unwrap();
        let masks = vec![("train".into(), train), ("test".into(), test)];
        GraphBundle::new(k, csr, Array2::zeros((n, 1)), labels, masks).unwrap()
    }

    #[test]
    fn ten_group_one_nodes_split_eight_two() {
        let b = bundle(vec![0; 10], 2, vec![true; 10], vec![false; 10]);
        let s = build_specialist_split(&b, &[1, 2], 0.8, 7).unwrap();
        assert_eq!(s.a_train.len(), 8);
        assert_eq!(s.b_train.len(), 2);
    }

    #[test]
    fn group_two_is_complementary() {
        let b = bundle(vec![1; 10], 2, vec![true; 10], vec![false; 10]);
        let s = build_specialist_split(&b, &[1, 2], 0.8, 7).unwrap();
        assert_eq!((s.a_train.len(), s.b_train.len()), (2, 8));
    }

    #[test]
    fn same_seed_same_masks() {
        let labels: Vec<u16> = (0..40).map(|i| (i % 4) as u16).collect();
        let train: Vec<bool> = (0..40).map(|i| i < 30).collect();
        let test: Vec<bool> = (0..40).map(|i| i >= 30).collect();
        let b = bundle(labels, 4, train, test);
        let g = default_class_groups(4);
        let s1 = build_specialist_split(&b, &g, 0.8, 3).unwrap();
        let s2 = build_specialist_split(&b, &g, 0.8, 3).unwrap();
        assert_eq!(s1, s2);
        let s3 = build_specialist_split(&b, &g, 0.8, 4).unwrap();
        assert_ne!(s1.a_train, s3.a_train);
    }

    #[test]
    fn group_spec_parsing() {
        assert_eq!(parse_class_groups("0-3:4-6", 7).unwrap(), vec![1, 1, 1, 1, 2, 2, 2]);
        assert_eq!(parse_class_groups("0,2:1", 3).unwrap(), vec![1, 2, 1]);
        assert_eq!(parse_class_groups("default", 7).unwrap(), default_class_groups(7));
        assert!(parse_class_groups("0:1", 3).is_err());
        assert!(parse_class_groups("0-9:1", 3).is_err());
    }

    #[test]
    fn bad_ratio_rejected() {
        let b = bundle(vec![0; 4], 1, vec![true; 4], vec![false; 4]);
        assert!(build_specialist_split(&b, &[1], 1.0, 0).is_err());
    }
}
