//! Dual-indexed sparse ratings and prototype selection.

use crate::data::{Dataset, RatingRecord, RatingScale};
use crate::error::{Error, Result};

/// One observed rating as `(user, item, rating)`.
pub type Triple = (u32, u32, f64);

/// Ratings indexed both by user (row) and by item (column).
///
/// Each row list holds `(item, rating)` and each column list holds
/// `(user, rating)`, both sorted by counterpart id.
#[derive(Clone, Debug)]
pub struct RatingsStore {
    by_user: Vec<Vec<(u32, f64)>>,
    by_item: Vec<Vec<(u32, f64)>>,
    triples: Vec<Triple>,
    mean_rating: f64,
    scale: RatingScale,
}

impl RatingsStore {
    pub fn build(train: &Dataset) -> Self {
        Self::from_records(
            train.num_users,
            train.num_items,
            &train.records,
            train.mean_rating,
            train.scale,
        )
    }

    pub fn from_records(
        num_users: usize,
        num_items: usize,
        records: &[RatingRecord],
        mean_rating: f64,
        scale: RatingScale,
    ) -> Self {
        let mut by_user = vec![Vec::new(); num_users];
        let mut by_item = vec![Vec::new(); num_items];
        for r in records {
            by_user[r.user as usize].push((r.item, r.rating));
            by_item[r.item as usize].push((r.user, r.rating));
        }
        for list in by_user.iter_mut().chain(by_item.iter_mut()) {
            list.sort_by_key(|&(id, _)| id);
        }
        let triples = by_user
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().map(move |&(i, r)| (u as u32, i, r)))
            .collect();
        RatingsStore {
            by_user,
            by_item,
            triples,
            mean_rating,
            scale,
        }
    }

    pub fn num_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn num_items(&self) -> usize {
        self.by_item.len()
    }

    /// Total number of stored ratings.
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn mean_rating(&self) -> f64 {
        self.mean_rating
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    /// Items rated by `user` with their ratings.
    pub fn user_ratings(&self, user: u32) -> &[(u32, f64)] {
        &self.by_user[user as usize]
    }

    /// Users who rated `item` with their ratings.
    pub fn item_ratings(&self, item: u32) -> &[(u32, f64)] {
        &self.by_item[item as usize]
    }

    /// All ratings in user-major order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Full cross-scan of the two indices.
    pub fn is_consistent(&self) -> bool {
        let row_total: usize = self.by_user.iter().map(Vec::len).sum();
        let col_total: usize = self.by_item.iter().map(Vec::len).sum();
        if row_total != col_total || row_total != self.triples.len() {
            return false;
        }
        self.by_user.iter().enumerate().all(|(u, list)| {
            list.iter().all(|&(i, r)| {
                self.by_item[i as usize]
                    .binary_search_by_key(&(u as u32), |&(id, _)| id)
                    .map(|pos| self.by_item[i as usize][pos].1 == r)
                    .unwrap_or(false)
            })
        })
    }
}

/// The prototype users `P_u` and items `P_v`.
///
/// Members are kept in ascending id order; a member's position in that order
/// is its row ("slot") in the corresponding prototype embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    users: Vec<u32>,
    items: Vec<u32>,
    user_slot: Vec<Option<u32>>,
    item_slot: Vec<Option<u32>>,
}

impl PrototypeSet {
    pub fn new(
        mut users: Vec<u32>,
        mut items: Vec<u32>,
        num_users: usize,
        num_items: usize,
    ) -> Result<Self> {
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        let slots = |ids: &[u32], n: usize, what: &str| -> Result<Vec<Option<u32>>> {
            let mut slot = vec![None; n];
            for (s, &id) in ids.iter().enumerate() {
                let entry = slot.get_mut(id as usize).ok_or_else(|| {
                    Error::Config(format!("prototype {what} {id} out of range ({n})"))
                })?;
                *entry = Some(s as u32);
            }
            Ok(slot)
        };
        let user_slot = slots(&users, num_users, "user")?;
        let item_slot = slots(&items, num_items, "item")?;
        Ok(PrototypeSet {
            users,
            items,
            user_slot,
            item_slot,
        })
    }

    /// Every user and item is a prototype.
    pub fn all(num_users: usize, num_items: usize) -> Self {
        Self::new(
            (0..num_users as u32).collect(),
            (0..num_items as u32).collect(),
            num_users,
            num_items,
        )
        .expect("ids in range")
    }

    pub fn users(&self) -> &[u32] {
        &self.users
    }

    pub fn items(&self) -> &[u32] {
        &self.items
    }

    pub fn user_slot(&self, user: u32) -> Option<usize> {
        self.user_slot
            .get(user as usize)
            .copied()
            .flatten()
            .map(|s| s as usize)
    }

    pub fn item_slot(&self, item: u32) -> Option<usize> {
        self.item_slot
            .get(item as usize)
            .copied()
            .flatten()
            .map(|s| s as usize)
    }

    pub fn is_user(&self, user: u32) -> bool {
        self.user_slot(user).is_some()
    }

    pub fn is_item(&self, item: u32) -> bool {
        self.item_slot(item).is_some()
    }

    /// Dimensions of the sets this was built against.
    pub fn universe(&self) -> (usize, usize) {
        (self.user_slot.len(), self.item_slot.len())
    }
}

/// Picks the `num_users` users and `num_items` items with the most ratings.
/// Ties go to the smaller id.
pub fn select_prototypes(
    store: &RatingsStore,
    num_users: usize,
    num_items: usize,
) -> Result<PrototypeSet> {
    if num_users > store.num_users() || num_items > store.num_items() {
        return Err(Error::Config(format!(
            "asked for {num_users}x{num_items} prototypes from a {}x{} store",
            store.num_users(),
            store.num_items()
        )));
    }
    let users = top_by_count(store.num_users(), num_users, |u| store.user_ratings(u).len());
    let items = top_by_count(store.num_items(), num_items, |i| store.item_ratings(i).len());
    let protos = PrototypeSet::new(users, items, store.num_users(), store.num_items())?;
    debug_assert_eq!(protos.users().len(), num_users);
    debug_assert_eq!(protos.items().len(), num_items);
    Ok(protos)
}

/// Same rule applied to raw per-id counts.
pub fn top_by_count(n: usize, k: usize, count: impl Fn(u32) -> usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.sort_by_key(|&id| (std::cmp::Reverse(count(id)), id));
    ids.truncate(k);
    ids
}

/// Ratings whose user and item are both prototypes, in prototype-slot
/// coordinates.
#[derive(Clone, Debug)]
pub struct PrototypeBlock {
    /// `(user slot, item slot, rating)` triples.
    pub ratings: Vec<(usize, usize, f64)>,
    /// Slot → global user id.
    pub users: Vec<u32>,
    /// Slot → global item id.
    pub items: Vec<u32>,
}

impl PrototypeBlock {
    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// The block as a stand-alone dataset over `|P_u| × |P_v|`; its id maps
    /// hold the global dense ids.
    pub fn to_dataset(&self, scale: RatingScale) -> Result<Dataset> {
        let records = self
            .ratings
            .iter()
            .map(|&(u, i, r)| RatingRecord {
                user: u as u32,
                item: i as u32,
                rating: r,
                timestamp: None,
            })
            .collect();
        Dataset::new(
            records,
            scale,
            self.users.iter().map(|&u| u as u64).collect(),
            self.items.iter().map(|&i| i as u64).collect(),
        )
    }
}

pub fn prototype_block(store: &RatingsStore, protos: &PrototypeSet) -> PrototypeBlock {
    let mut ratings = Vec::new();
    for (us, &u) in protos.users().iter().enumerate() {
        for &(i, r) in store.user_ratings(u) {
            if let Some(is) = protos.item_slot(i) {
                ratings.push((us, is, r));
            }
        }
    }
    if ratings.is_empty() {
        tracing::warn!("prototype block is empty; pretraining will be a no-op");
    }
    PrototypeBlock {
        ratings,
        users: protos.users().to_vec(),
        items: protos.items().to_vec(),
    }
}
