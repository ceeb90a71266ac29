use super::types::{ActionEvent, ActionType};

/// The last `min(t, len)` events, order preserved.
pub fn truncate_to_horizon(events: &[ActionEvent], t: usize) -> &[ActionEvent] {
    &events[events.len().saturating_sub(t)..]
}

/// Fixed-length mix of the most recent conversions and the most recent
/// views/clicks, merged oldest first.
///
/// A category short of its quota hands the remainder to the other category.
/// Organic events are never selected.
pub fn compose_sequence(events: &[ActionEvent], views_quota: usize, conv_quota: usize) -> Vec<ActionEvent> {
    let views: Vec<usize> = (0..events.len())
        .rev()
        .filter(|&i| events[i].action_type.is_view_like())
        .collect();
    let convs: Vec<usize> = (0..events.len())
        .rev()
        .filter(|&i| events[i].action_type == ActionType::Conversion)
        .collect();
    let mut n_views = views_quota.min(views.len());
    let mut n_convs = conv_quota.min(convs.len());
    n_views = (n_views + (conv_quota - n_convs)).min(views.len());
    n_convs = (n_convs + (views_quota.saturating_sub(n_views))).min(convs.len());

    let mut picked: Vec<usize> = views[..n_views].iter().chain(&convs[..n_convs]).copied().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| events[i].clone()).collect()
}
