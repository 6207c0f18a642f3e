fn main() {
    let code = attentive_mos::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
