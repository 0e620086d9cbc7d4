//! Copy of the reference external backend so this crate's tests can spawn it.

fn main() -> std::process::ExitCode {
    slidekit::backend::reference::run(std::env::args().skip(1))
}
