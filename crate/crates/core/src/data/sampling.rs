/// Source frame indices for resampling a video of `n_frames` to `target`
/// frames: an endpoint-inclusive linspace with round-half-up, so indices
/// repeat when the video is shorter than `target`.
pub fn sample_frames(n_frames: usize, target: usize) -> Vec<usize> {
    assert!(n_frames >= 1 && target >= 1, "sample_frames needs n_frames >= 1 and target >= 1");
    if target == 1 {
        return vec![0];
    }
    let span = (n_frames - 1) as u128;
    let denom = (target - 1) as u128;
    // round_half_up(i·span/denom) = floor((2·i·span + denom) / (2·denom))
    (0..target as u128)
        .map(|i| ((2 * i * span + denom) / (2 * denom)) as usize)
        .collect()
}
