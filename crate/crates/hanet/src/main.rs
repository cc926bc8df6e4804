fn main() -> std::process::ExitCode {
    hanet::cli::run()
}
