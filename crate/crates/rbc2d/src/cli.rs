//! Command-line interface (placeholder during bring-up).

pub fn run() -> i32 {
    0
}
