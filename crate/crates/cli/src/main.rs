fn main() {
    println!("gaitnet");
}
