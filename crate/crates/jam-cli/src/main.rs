fn main() {
    jam_cli::cli::main_entry();
}
