fn main() {
    let code = cal_core::cli::cli_main(std::env::args_os());
    std::process::exit(code);
}
