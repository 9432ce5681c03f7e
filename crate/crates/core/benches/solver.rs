fn main() {
    // Placeholder until the bench suite lands.
}
