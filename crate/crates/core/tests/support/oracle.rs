//! Reference implementations used only by tests. Nothing here calls into the
//! library's packing code.

/// Straight-line multimodal sequence packing over plain lengths: build the
/// (item, length) list, sort it descending by length, then place each item in
/// the first bin whose running sum stays within `context`. Returns item
/// indices per bin.
pub fn pack_sequences(lens: &[usize], context: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<(usize, usize)> = Vec::new();
    for (d, &len_d) in lens.iter().enumerate() {
        items.push((d, len_d));
    }

    // insertion sort, descending by length; equal lengths keep input order
    for i in 1..items.len() {
        let mut j = i;
        while j > 0 && items[j - 1].1 < items[j].1 {
            items.swap(j - 1, j);
            j -= 1;
        }
    }

    let mut bins: Vec<Vec<(usize, usize)>> = Vec::new();
    for (d, len_d) in items {
        let mut placed = false;
        for bin in bins.iter_mut() {
            let mut sum = 0;
            for (_, len) in bin.iter() {
                sum += len;
            }
            if sum + len_d <= context {
                bin.push((d, len_d));
                placed = true;
                break;
            }
        }
        if !placed {
            bins.push(vec![(d, len_d)]);
        }
    }

    bins.into_iter()
        .map(|bin| bin.into_iter().map(|(d, _)| d).collect())
        .collect()
}

/// Minimum number of bins, by exhaustive branch and bound. Meant for n <= 12.
pub fn optimal_bins(lens: &[usize], capacity: usize) -> usize {
    fn search(
        items: &[usize],
        next: usize,
        loads: &mut Vec<usize>,
        capacity: usize,
        best: &mut usize,
    ) {
        if loads.len() >= *best {
            return;
        }
        if next == items.len() {
            *best = loads.len();
            return;
        }
        let item = items[next];
        for b in 0..loads.len() {
            // bins with equal load are interchangeable
            if loads[..b].contains(&loads[b]) {
                continue;
            }
            if loads[b] + item <= capacity {
                loads[b] += item;
                search(items, next + 1, loads, capacity, best);
                loads[b] -= item;
            }
        }
        loads.push(item);
        search(items, next + 1, loads, capacity, best);
        loads.pop();
    }

    if lens.is_empty() {
        return 0;
    }
    let mut items = lens.to_vec();
    items.sort_unstable_by(|a, b| b.cmp(a));
    let mut best = items.len() + 1;
    search(&items, 0, &mut Vec::new(), capacity, &mut best);
    best
}

/// Padding ratio of a packing: unused slots over all slots.
pub fn padding_ratio(lens: &[usize], bins: &[Vec<usize>], context: usize) -> f64 {
    let used: usize = lens.iter().sum();
    let slots = bins.len() * context;
    if slots == 0 {
        0.0
    } else {
        (slots - used) as f64 / slots as f64
    }
}

/// Mean of `values[r][c]` over a window, summing cell by cell.
pub fn window_mean(
    values: &[Vec<Vec<f64>>],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in rows {
        for c in cols.clone() {
            sum += values[r][c][k];
            n += 1;
        }
    }
    sum / n as f64
}
