fn main() {
    deepcat::cli::main()
}
