//! Fixed desk-scale catalog: 30 categories, 200 merchants, 1000 products and
//! five price bands. Generated from a constant seed, so every run sees the
//! same catalog.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CATEGORY_NAMES: [&str; 30] = [
    "Sichuan",
    "Cantonese",
    "Hunan",
    "Dessert",
    "Noodles",
    "Dumplings",
    "Hot Pot",
    "BBQ",
    "Bubble Tea",
    "Coffee",
    "Bakery",
    "Burgers",
    "Pizza",
    "Fried Chicken",
    "Sushi",
    "Korean",
    "Thai",
    "Vietnamese",
    "Indian",
    "Salads",
    "Congee",
    "Rice Bowls",
    "Seafood",
    "Vegetarian",
    "Breakfast",
    "Snacks",
    "Fruit",
    "Juice",
    "Malatang",
    "Dim Sum",
];

const MERCHANT_PREFIXES: [&str; 7] = [
    "Golden",
    "Lucky",
    "Happy",
    "Old Town",
    "Jade",
    "Red Lantern",
    "Sunny",
];
const MERCHANT_SUFFIXES: [&str; 4] = ["House", "Kitchen", "Express", "Corner"];
const DISH_WORDS: [&str; 5] = ["Special", "Combo", "Classic", "Deluxe", "Set"];

pub const N_MERCHANTS: usize = 200;
pub const N_PRODUCTS: usize = 1000;
const CATALOG_SEED: u64 = 0x4b46_5243_4154_4c47;

/// Lowest price any synthetic order can carry, in minor units.
pub const MIN_ORDER_PRICE: i64 = 300;
/// Highest price any synthetic order or list price can carry.
pub const MAX_ORDER_PRICE: i64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merchant {
    pub id: String,
    pub name: String,
    pub category: String,
    pub typical_price_minor: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub name: String,
    pub merchant_id: String,
    pub category: String,
    pub list_price_minor: i64,
}

/// Half-open price interval `[min_minor, max_minor)`; `max_minor = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceBand {
    pub name: String,
    pub min_minor: i64,
    pub max_minor: Option<i64>,
}

impl PriceBand {
    pub fn contains(&self, price: i64) -> bool {
        price >= self.min_minor && self.max_minor.is_none_or(|m| price < m)
    }

    /// Representative price used for proximity scoring.
    pub fn midpoint(&self) -> i64 {
        match self.max_minor {
            Some(max) => (self.min_minor + max) / 2,
            None => (self.min_minor + MAX_ORDER_PRICE) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub categories: Vec<String>,
    pub merchants: Vec<Merchant>,
    pub products: Vec<Product>,
    pub price_bands: Vec<PriceBand>,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("cannot read catalog {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse catalog {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

fn default_price_bands() -> Vec<PriceBand> {
    let band = |name: &str, min, max| PriceBand {
        name: name.to_string(),
        min_minor: min,
        max_minor: max,
    };
    vec![
        band("under 15", 0, Some(1500)),
        band("15 to 30", 1500, Some(3000)),
        band("30 to 50", 3000, Some(5000)),
        band("50 to 80", 5000, Some(8000)),
        band("80 and above", 8000, None),
    ]
}

impl Catalog {
    /// The built-in catalog, built once per process.
    pub fn shared() -> &'static Catalog {
        static CATALOG: std::sync::OnceLock<Catalog> = std::sync::OnceLock::new();
        CATALOG.get_or_init(Catalog::build_standard)
    }

    pub fn standard() -> Self {
        Self::shared().clone()
    }

    fn build_standard() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CATALOG_SEED);
        let categories: Vec<String> = CATEGORY_NAMES.iter().map(|s| s.to_string()).collect();
        let base_price: Vec<i64> = categories
            .iter()
            .map(|_| rng.gen_range(800..=6000))
            .collect();

        let mut products = Vec::with_capacity(N_PRODUCTS);
        for j in 0..N_PRODUCTS {
            let m = j % N_MERCHANTS;
            let c = m % categories.len();
            let jitter = rng.gen_range(-400..=400);
            products.push(Product {
                id: format!("p{j:04}"),
                name: format!("{} {} No.{}", categories[c], DISH_WORDS[j / N_MERCHANTS], m),
                merchant_id: format!("m{m:03}"),
                category: categories[c].clone(),
                list_price_minor: (base_price[c] + jitter).clamp(MIN_ORDER_PRICE, MAX_ORDER_PRICE),
            });
        }
        let merchants = (0..N_MERCHANTS)
            .map(|i| {
                let c = i % categories.len();
                let own: Vec<i64> = products
                    .iter()
                    .skip(i)
                    .step_by(N_MERCHANTS)
                    .map(|p| p.list_price_minor)
                    .collect();
                Merchant {
                    id: format!("m{i:03}"),
                    name: format!(
                        "{} {} {}",
                        MERCHANT_PREFIXES[i / categories.len()],
                        categories[c],
                        MERCHANT_SUFFIXES[i % MERCHANT_SUFFIXES.len()]
                    ),
                    category: categories[c].clone(),
                    typical_price_minor: own.iter().sum::<i64>() / own.len() as i64,
                }
            })
            .collect();
        Self {
            categories,
            merchants,
            products,
            price_bands: default_price_bands(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let s = fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&s).map_err(|source| CatalogError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name.trim()))
    }

    pub fn merchant(&self, id: &str) -> Option<&Merchant> {
        self.merchants.iter().find(|m| m.id == id)
    }

    pub fn merchant_by_name(&self, name: &str) -> Option<&Merchant> {
        self.merchants
            .iter()
            .find(|m| m.name.eq_ignore_ascii_case(name.trim()))
    }

    pub fn merchants_in(&self, category: &str) -> impl Iterator<Item = &Merchant> {
        let category = category.to_string();
        self.merchants
            .iter()
            .filter(move |m| m.category == category)
    }

    pub fn products_of(&self, merchant_id: &str) -> impl Iterator<Item = &Product> {
        let merchant_id = merchant_id.to_string();
        self.products
            .iter()
            .filter(move |p| p.merchant_id == merchant_id)
    }

    pub fn products_in(&self, category: &str) -> impl Iterator<Item = &Product> {
        let category = category.to_string();
        self.products.iter().filter(move |p| p.category == category)
    }

    pub fn band_for(&self, price: i64) -> Option<&PriceBand> {
        self.price_bands.iter().find(|b| b.contains(price))
    }

    pub fn max_price_minor(&self) -> i64 {
        self.products
            .iter()
            .map(|p| p.list_price_minor)
            .max()
            .unwrap_or(MAX_ORDER_PRICE)
    }
}
