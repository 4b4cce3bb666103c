//! The four study scenarios. Each has a background brief, a fixed initial
//! prompt, and pinned seeds so every session starts from the same images.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Scenario {
    pub id: &'static str,
    pub title: &'static str,
    pub background: &'static str,
    pub initial_prompt: &'static str,
    /// First seed of the fixed initial image set.
    pub base_seed: u64,
}

pub const SCENARIOS: [Scenario; 4] = [
    Scenario {
        id: "S1",
        title: "Product Advertisement",
        background: "You are designing an advertising campaign for a new line of coffee machines. To ensure the campaign resonates with a wider audience, you use generative models to create marketing images that showcase a variety of users interacting with the product.",
        initial_prompt: "Design an advertisement image showcasing a range of users operating coffee machines.",
        base_seed: 1001,
    },
    Scenario {
        id: "S2",
        title: "Tourist Promotion",
        background: "You are creating a travel campaign to attract a variety of visitors to a specific destination. To make the promotional materials more engaging, you use generative models to design posters that highlight a broader array of experiences.",
        initial_prompt: "Design a promotional poster to attract a variety of visitors to a tourist destination.",
        base_seed: 2001,
    },
    Scenario {
        id: "S3",
        title: "Fictional Character Generation",
        background: "You are creating a superhero video game that\u{2019}s fun and relatable to a range of users. You decide to use generative models to help visualize a new character.",
        initial_prompt: "Design a video game superhero character that is relatable.",
        base_seed: 3001,
    },
    Scenario {
        id: "S4",
        title: "Interior Design",
        background: "You are helping design the furniture layout for a model one-bedroom rental apartment. To make the apartment appealing to different potential tenants, you try to visualize different furniture placements before setting everything up.",
        initial_prompt: "Design an interior of an apartment that\u{2019}s appealing to potential tenants.",
        base_seed: 4001,
    },
];

pub fn scenario(id: &str) -> Option<&'static Scenario> {
    SCENARIOS.iter().find(|s| s.id.eq_ignore_ascii_case(id))
}
