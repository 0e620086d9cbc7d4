//! Reference external backend; see `slidekit::backend::reference`.

fn main() -> std::process::ExitCode {
    slidekit::backend::reference::run(std::env::args().skip(1))
}
