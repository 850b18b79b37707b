/// Scientific notation with 17 significant digits; parses back to the same `f64`.
pub fn sci17(x: f64) -> String {
    format!("{x:.16e}")
}
