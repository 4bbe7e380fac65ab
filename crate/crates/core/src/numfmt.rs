/// 17 significant digits, enough for every f64 to round-trip exactly.
pub(crate) fn f17(x: f64) -> String {
    format!("{x:.16e}")
}
