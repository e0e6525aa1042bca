fn main() {
    holdshift::init_logging();
    if let Err(e) = holdshift::run_from(std::env::args_os()) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
