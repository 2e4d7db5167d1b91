fn main() {
    let code = fiberloop::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}
