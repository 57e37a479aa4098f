fn main() {
    env_logger::init();
    let stdin = std::io::stdin();
    let code = minreveal::cli::run(
        std::env::args_os(),
        &mut stdin.lock(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
