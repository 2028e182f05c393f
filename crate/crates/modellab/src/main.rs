fn main() {
    std::process::exit(modellab::runner::run(std::env::args_os()));
}
