fn main() {
    println!("bilo");
}
