//! Binary connectivity masks for autoregressive networks.

use rand::Rng;

use super::BijectorError;
use crate::diffcore::Tensor;

/// Masks and node degrees of a masked autoregressive network.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeMasks {
    /// One `fan_in x fan_out` binary matrix per layer.
    pub masks: Vec<Tensor>,
    /// Degrees of every layer's nodes, inputs first.
    pub degrees: Vec<Vec<usize>>,
}

/// Builds masks for a network `dim -> hidden... -> blocks * (dim - 1)`.
///
/// Inputs carry degrees `1..=dim`, hidden nodes random degrees in
/// `1..=dim-1`, and each of the `blocks` output blocks carries `1..=dim-1`
/// in order, so output `j` of a block parameterizes dimension `j + 2` and
/// sees only inputs `1..=j+1`. A connection `k -> k'` exists when `k <= k'`.
pub fn made_masks<R: Rng + ?Sized>(
    dim: usize,
    hidden: &[usize],
    blocks: usize,
    rng: &mut R,
) -> Result<MadeMasks, BijectorError> {
    if dim < 2 {
        return Err(BijectorError::Dim(format!(
            "autoregressive masks need at least 2 dimensions, got {dim}"
        )));
    }
    if blocks == 0 || hidden.contains(&0) {
        return Err(BijectorError::Dim("empty mask layer".into()));
    }
    let mut degrees = vec![(1..=dim).collect::<Vec<_>>()];
    for &w in hidden {
        degrees.push((0..w).map(|_| rng.random_range(1..dim)).collect());
    }
    degrees.push((0..blocks).flat_map(|_| 1..dim).collect());

    let masks = degrees
        .windows(2)
        .map(|pair| {
            let (din, dout) = (&pair[0], &pair[1]);
            let data = din
                .iter()
                .flat_map(|&k| dout.iter().map(move |&kp| if k <= kp { 1.0 } else { 0.0 }))
                .collect();
            Tensor::matrix(din.len(), dout.len(), data)
        })
        .collect();
    Ok(MadeMasks { masks, degrees })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng;

    #[test]
    fn smallest_case_connects_only_first_input() {
        let m = made_masks(2, &[4], 2, &mut rng(1)).unwrap();
        // Every hidden degree is 1: input 1 feeds all, input 2 feeds none.
        assert!(m.masks[0].row(0).iter().all(|&v| v == 1.0));
        assert!(m.masks[0].row(1).iter().all(|&v| v == 0.0));
        assert!(m.masks[1].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masks_are_binary_with_expected_shapes() {
        let m = made_masks(5, &[16, 8], 3, &mut rng(9)).unwrap();
        let shapes: Vec<_> = m.masks.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![5, 16], vec![16, 8], vec![8, 12]]);
        for t in &m.masks {
            assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert_eq!(m.degrees[3], vec![1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4]);
        assert!(m.degrees[1].iter().all(|&d| (1..5).contains(&d)));
    }

    #[test]
    fn too_few_dimensions_rejected() {
        assert!(made_masks(1, &[4], 2, &mut rng(0)).is_err());
    }
}
