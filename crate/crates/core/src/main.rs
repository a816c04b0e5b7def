fn main() -> std::process::ExitCode {
    icd_treesearch::cli::main()
}
