fn main() -> std::process::ExitCode {
    mirpairs::cli::main_entry()
}
