fn main() {
    std::process::exit(speaker_align_cli::main_entry(std::env::args_os()));
}
