fn main() {
    std::process::exit(neurachip_cli::main_with(std::env::args_os()) as i32);
}
