fn main() {
    let menu = auctionwire::menu::Menu::new(
        1,
        auctionwire::num::q_int(1),
        vec![
            auctionwire::menu::MenuLine::zero(1),
            auctionwire::menu::MenuLine::items(vec![auctionwire::num::q(1,2)], auctionwire::num::q(1,10)),
        ],
    ).unwrap();
    let s = serde_json::to_string(&menu).unwrap();
    println!("ser: {s}");
    let back: Result<auctionwire::menu::Menu, _> = serde_json::from_str(&s);
    println!("de: {:?}", back.err());
    let parsed: Result<auctionwire::menu::Menu, _> = serde_json::from_str(
        r#"{"n_items":1,"U":1.0,"lines":[{"item_probs":[0.0],"payment":0.0},{"bundle_dist":{"1":0.5,"0":0.5},"payment":0.25}]}"#);
    println!("lit: {:?}", parsed.err());
}
